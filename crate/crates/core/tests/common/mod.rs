//! Independent oracles shared by the integration tests. Nothing here calls
//! into the routing or cache code it is compared against.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use servesim::dsched::{
    DecodePredictor, GlobalPromptTree, Heatmap, HeatmapAxes, NoisyOracle, RpsGrid, Unit, UnitKind,
    UnitView,
};
use servesim::rtc::{BlockId, Rtc, RtcConfig};

/// Length of the longest common prefix, rounded down to whole blocks.
pub fn block_lcp(a: &[u32], b: &[u32], block_size: usize) -> usize {
    let n = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    n / block_size * block_size
}

// ---------------------------------------------------------------------------
// Routing reference

/// Cached sequences per engine, kept as plain lists.
#[derive(Debug, Clone, Default)]
pub struct NaiveCaches {
    pub colocated: BTreeMap<u32, Vec<Vec<u32>>>,
    pub prefill: BTreeMap<u32, Vec<Vec<u32>>>,
}

impl NaiveCaches {
    fn matched(&self, kind: UnitKind, te: u32, tokens: &[u32], bs: usize) -> usize {
        let table = match kind {
            UnitKind::Colocated => &self.colocated,
            UnitKind::Disaggregated => &self.prefill,
        };
        table
            .get(&te)
            .map(|seqs| {
                seqs.iter()
                    .map(|s| block_lcp(s, tokens, bs))
                    .max()
                    .unwrap_or(0)
            })
            .unwrap_or(0)
    }
}

fn kind_of(u: &Unit) -> UnitKind {
    match u {
        Unit::Colocated { .. } => UnitKind::Colocated,
        Unit::DisaggPair { .. } => UnitKind::Disaggregated,
    }
}

fn entry_te(u: &Unit) -> u32 {
    match u {
        Unit::Colocated { te } => *te,
        Unit::DisaggPair { prefill, .. } => *prefill,
    }
}

/// Last index whose edge is <= x, or None below the first edge.
fn naive_bucket<T: PartialOrd>(edges: &[T], x: T) -> Option<usize> {
    let mut found = None;
    for (i, e) in edges.iter().enumerate() {
        if *e <= x {
            found = Some(i);
        }
    }
    found
}

/// Straight-line transcription of the routing algorithm: heatmap kind
/// choice, balance test, then locality or least load.
#[allow(clippy::too_many_arguments)]
pub fn reference_route(
    request_id: &str,
    tokens: &[u32],
    true_decode: u32,
    units: &[UnitView],
    hm: &Heatmap,
    predictor: &NoisyOracle,
    caches: &NaiveCaches,
    block_size: usize,
    epsilon: f64,
) -> Unit {
    if units.len() == 1 {
        return units[0].unit;
    }

    // Step 1: decode-length prediction and heatmap cell.
    let predicted = predictor.predict_len(request_id, true_decode);
    let prompt = tokens.len() as u32;
    let mut want = UnitKind::Disaggregated;
    if prompt > 0 {
        let ratio = predicted as f64 / prompt as f64;
        let row = naive_bucket(&hm.axes.prefill_edges, prompt);
        let col = naive_bucket(&hm.axes.ratio_edges, ratio);
        if let (Some(r), Some(c)) = (row, col) {
            if hm.combined[r][c] < 0.0 {
                want = UnitKind::Colocated;
            }
        }
    }
    let mut sub: Vec<UnitView> = Vec::new();
    for u in units {
        if kind_of(&u.unit) == want {
            sub.push(*u);
        }
    }
    if sub.is_empty() {
        sub = units.to_vec();
    }

    // Step 2: balance test.
    let mut max = 0u64;
    let mut min = u64::MAX;
    let mut sum = 0f64;
    for u in &sub {
        max = max.max(u.load);
        min = min.min(u.load);
        sum += u.load as f64;
    }
    let mean = sum / sub.len() as f64;
    let balanced = (max - min) as f64 <= epsilon * mean.max(1.0);

    // Step 3: pick.
    let mut best = sub[0];
    if balanced {
        let mut best_m = caches.matched(
            kind_of(&best.unit),
            entry_te(&best.unit),
            tokens,
            block_size,
        );
        for u in &sub[1..] {
            let m = caches.matched(kind_of(&u.unit), entry_te(&u.unit), tokens, block_size);
            let better = m > best_m
                || (m == best_m && u.queued < best.queued)
                || (m == best_m
                    && u.queued == best.queued
                    && entry_te(&u.unit) < entry_te(&best.unit));
            if better {
                best = *u;
                best_m = m;
            }
        }
    } else {
        for u in &sub[1..] {
            if u.load < best.load
                || (u.load == best.load && entry_te(&u.unit) < entry_te(&best.unit))
            {
                best = *u;
            }
        }
    }
    best.unit
}

/// One randomized routing scenario.
pub struct RouteFixture {
    pub request_id: String,
    pub tokens: Vec<u32>,
    pub true_decode: u32,
    pub units: Vec<UnitView>,
    pub heatmap: Heatmap,
    pub predictor: NoisyOracle,
    pub caches: NaiveCaches,
    pub colocated_tree: GlobalPromptTree,
    pub prefill_tree: GlobalPromptTree,
    pub block_size: usize,
    pub epsilon: f64,
}

fn variant(bases: &[Vec<u32>], rng: &mut ChaCha8Rng, max_len: usize) -> Vec<u32> {
    let base = &bases[rng.random_range(0..bases.len())];
    let len = rng.random_range(0..=max_len.min(base.len()));
    let mut s = base[..len].to_vec();
    if len > 0 && rng.random_bool(0.5) {
        let at = rng.random_range(0..len);
        s[at] = s[at].wrapping_add(1);
    }
    s
}

pub fn route_fixture(seed: u64) -> RouteFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block_size = [8usize, 16][rng.random_range(0..2)];
    let bases: Vec<Vec<u32>> = (0..3)
        .map(|_| (0..10_000).map(|_| rng.random_range(0..4)).collect())
        .collect();

    let n_units = rng.random_range(1..=6);
    let mut next_te = 0u32;
    let base_load = rng.random_range(0..5_000u64);
    let spread = [0u64, 10, 200, 5_000][rng.random_range(0..4)];
    let mut units = Vec::new();
    for _ in 0..n_units {
        let unit = if rng.random_bool(0.5) {
            next_te += 1;
            Unit::Colocated { te: next_te - 1 }
        } else {
            next_te += 2;
            Unit::DisaggPair {
                prefill: next_te - 2,
                decode: next_te - 1,
            }
        };
        let load = base_load + rng.random_range(0..=spread);
        units.push(UnitView {
            unit,
            load,
            queued: rng.random_range(0..=load.min(3)),
        });
    }
    // Shuffle so ids are not in input order.
    for i in (1..units.len()).rev() {
        let j = rng.random_range(0..=i);
        units.swap(i, j);
    }

    let axes = HeatmapAxes::default();
    let cells: Vec<Vec<f64>> = (0..axes.rows())
        .map(|_| {
            (0..axes.cols())
                .map(|_| match rng.random_range(0..5) {
                    0 => 0.0,
                    1 | 2 => -rng.random::<f64>(),
                    _ => rng.random::<f64>(),
                })
                .collect()
        })
        .collect();
    let heatmap = Heatmap {
        axes,
        per_rps: vec![RpsGrid {
            rps: 1.0,
            cells: cells.clone(),
        }],
        combined: cells,
    };

    let mut caches = NaiveCaches::default();
    let mut colocated_tree = GlobalPromptTree::new(block_size);
    let mut prefill_tree = GlobalPromptTree::new(block_size);
    for u in &units {
        for _ in 0..rng.random_range(0..4) {
            let s = variant(&bases, &mut rng, 2_048);
            let s = s[..s.len() / block_size * block_size].to_vec();
            match u.unit {
                Unit::Colocated { te } => {
                    colocated_tree.insert(te, &s);
                    caches.colocated.entry(te).or_default().push(s);
                }
                Unit::DisaggPair { prefill, .. } => {
                    prefill_tree.insert(prefill, &s);
                    caches.prefill.entry(prefill).or_default().push(s);
                }
            }
        }
    }

    let tokens = variant(&bases, &mut rng, 9_500);
    // Some prompts sit entirely inside the cached range.
    let tokens = if rng.random_bool(0.5) {
        tokens[..tokens.len().min(2_200)].to_vec()
    } else {
        tokens
    };
    let true_decode = rng.random_range(0..3_000);
    RouteFixture {
        request_id: format!("req-{seed}"),
        tokens,
        true_decode,
        units,
        heatmap,
        predictor: NoisyOracle {
            bucket_size: 128,
            accuracy: 0.849,
            seed: seed.wrapping_mul(31),
        },
        caches,
        colocated_tree,
        prefill_tree,
        block_size,
        epsilon: [0.0, 0.1, 0.2, 0.5][rng.random_range(0..4)],
    }
}

// ---------------------------------------------------------------------------
// Cache index model

#[derive(Debug, Clone)]
pub enum CacheOp {
    /// Index a variant of base `base` truncated to `len` tokens.
    Commit {
        base: usize,
        len: usize,
        mutate: Option<usize>,
    },
    /// Free the block behind the `pick`-th indexed prefix.
    Free { pick: usize },
    Match {
        base: usize,
        len: usize,
        mutate: Option<usize>,
    },
}

/// Plain-list model of the prefix index: committed sequences truncated to
/// whole blocks, plus the block that first indexed each prefix.
#[derive(Debug, Default)]
pub struct NaiveIndex {
    pub seqs: Vec<Vec<u32>>,
    pub owner: BTreeMap<Vec<u32>, BlockId>,
}

impl NaiveIndex {
    pub fn longest(&self, query: &[u32], bs: usize) -> usize {
        self.seqs
            .iter()
            .map(|s| block_lcp(s, query, bs))
            .max()
            .unwrap_or(0)
    }

    /// Drops `prefix` and every prefix extending it.
    pub fn cut(&mut self, prefix: &[u32], bs: usize) {
        let keep = prefix.len() - bs;
        for s in &mut self.seqs {
            if s.len() >= prefix.len() && s[..prefix.len()] == *prefix {
                s.truncate(keep);
            }
        }
        self.seqs.retain(|s| !s.is_empty());
        self.owner
            .retain(|k, _| !(k.len() >= prefix.len() && k[..prefix.len()] == *prefix));
    }
}

fn op_tokens(bases: &[Vec<u32>], base: usize, len: usize, mutate: Option<usize>) -> Vec<u32> {
    let b = &bases[base % bases.len()];
    let mut t = b[..len.min(b.len())].to_vec();
    if let Some(m) = mutate {
        if !t.is_empty() {
            let i = m % t.len();
            t[i] = t[i].wrapping_add(7);
        }
    }
    t
}

pub fn random_ops(seed: u64, count: usize) -> (Vec<Vec<u32>>, Vec<CacheOp>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<Vec<u32>> = (0..3)
        .map(|_| (0..200).map(|_| rng.random_range(0..3)).collect())
        .collect();
    let gen = |rng: &mut ChaCha8Rng| {
        let base = rng.random_range(0..3);
        let len = rng.random_range(0..=200);
        let mutate = rng.random_bool(0.4).then(|| rng.random_range(0..200));
        (base, len, mutate)
    };
    let ops = (0..count)
        .map(|_| match rng.random_range(0..10) {
            0..=3 => {
                let (base, len, mutate) = gen(&mut rng);
                CacheOp::Commit { base, len, mutate }
            }
            4..=5 => CacheOp::Free {
                pick: rng.random_range(0..1_000),
            },
            _ => {
                let (base, len, mutate) = gen(&mut rng);
                CacheOp::Match { base, len, mutate }
            }
        })
        .collect();
    (bases, ops)
}

/// Replays `ops` against a real cache and the naive model, failing on the
/// first divergence of matched length or matched block ids.
pub fn replay_cache_ops(
    bases: &[Vec<u32>],
    ops: &[CacheOp],
    block_size: usize,
) -> Result<(), String> {
    let mut rtc = Rtc::new(RtcConfig {
        block_size,
        npu_blocks: 8192,
        dram_blocks: 0,
        demote_on_evict: false,
    });
    let mut model = NaiveIndex::default();
    let bs = block_size;
    for (step, op) in ops.iter().enumerate() {
        let now = step as u64;
        match op {
            CacheOp::Commit { base, len, mutate } => {
                let t = op_tokens(bases, *base, *len, *mutate);
                let ids = rtc
                    .alloc_blocks(t.len().div_ceil(bs), now)
                    .map_err(|e| e.to_string())?;
                rtc.commit_prefix(&t, &ids, None, now)
                    .map_err(|e| e.to_string())?;
                rtc.release(&ids, now).map_err(|e| e.to_string())?;
                let full = t.len() / bs * bs;
                for i in 0..full / bs {
                    model
                        .owner
                        .entry(t[..(i + 1) * bs].to_vec())
                        .or_insert(ids[i]);
                }
                if full > 0 {
                    model.seqs.push(t[..full].to_vec());
                }
            }
            CacheOp::Free { pick } => {
                if model.owner.is_empty() {
                    continue;
                }
                let (prefix, id) = model
                    .owner
                    .iter()
                    .nth(pick % model.owner.len())
                    .map(|(k, v)| (k.clone(), *v))
                    .expect("non-empty");
                rtc.free(&[id]).map_err(|e| format!("step {step}: {e}"))?;
                model.cut(&prefix, bs);
            }
            CacheOp::Match { base, len, mutate } => {
                let t = op_tokens(bases, *base, *len, *mutate);
                let want = model.longest(&t, bs);
                let got = rtc.match_by_prefix_tokens(&t, now);
                if got.matched_token_count as usize != want {
                    return Err(format!(
                        "step {step}: matched {} want {want}",
                        got.matched_token_count
                    ));
                }
                let want_ids: Vec<BlockId> = (0..want / bs)
                    .map(|i| model.owner[&t[..(i + 1) * bs]])
                    .collect();
                let got_ids: Vec<BlockId> = got.blocks.iter().map(|(b, _)| *b).collect();
                if got_ids != want_ids {
                    return Err(format!("step {step}: blocks {got_ids:?} want {want_ids:?}"));
                }
                if rtc.peek_prefix_len(&t) as usize != want {
                    return Err(format!("step {step}: peek disagrees with match"));
                }
            }
        }
    }
    if rtc.evictions() != 0 {
        return Err("unexpected eviction".into());
    }
    rtc.check_invariants()
}
