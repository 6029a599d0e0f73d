mod common;

use common::{random_ops, replay_cache_ops, CacheOp};
use proptest::prelude::*;

fn op() -> impl Strategy<Value = CacheOp> {
    let seq = (0usize..3, 0usize..=200, proptest::option::of(0usize..200));
    prop_oneof![
        4 => seq.clone().prop_map(|(base, len, mutate)| CacheOp::Commit { base, len, mutate }),
        2 => (0usize..1_000).prop_map(|pick| CacheOp::Free { pick }),
        4 => seq.prop_map(|(base, len, mutate)| CacheOp::Match { base, len, mutate }),
    ]
}

proptest! {
    #[test]
    fn prefix_match_equals_naive_scan(
        bases in proptest::collection::vec(proptest::collection::vec(0u32..3, 200), 3),
        ops in proptest::collection::vec(op(), 1..80),
        bs in prop_oneof![Just(1usize), Just(4), Just(16)],
    ) {
        prop_assert_eq!(replay_cache_ops(&bases, &ops, bs), Ok(()));
    }
}

#[test]
fn seeded_sequences_match_naive_scan() {
    for seed in 0..200 {
        let (bases, ops) = random_ops(seed, 60);
        assert_eq!(replay_cache_ops(&bases, &ops, 4), Ok(()), "seed {seed}");
    }
}
