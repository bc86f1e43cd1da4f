mod common;

use common::schedule_state::{random_decode_pool, random_state, NOW};
use common::{enumerate_prefill_choice, random_prefill_pool};
use kvsched::conductor::{
    apply_migration, find_best_prefix_match, plan_migration, schedule, select_decoding_instance, ConductorConfig,
    Outcome, ScheduleInput, SloConfig,
};
use kvsched::kvcache::BlockKey;
use kvsched::perf_model::PerfModelParams;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn choice_matches_enumeration(seed in any::<u64>()) {
        let s = random_state(seed);
        let slo = SloConfig::fixed(f64::INFINITY, f64::INFINITY);
        let req = ScheduleInput { input_len: s.input_len, blocks: &s.blocks };
        let d = schedule(req, &s.prefill, &s.decode, &slo, &s.cfg, &s.perf, NOW).unwrap();
        let e = enumerate_prefill_choice(&s.prefill, &s.blocks, s.input_len, &s.cfg, &s.perf, NOW);
        prop_assert_eq!(d.prefill, e.instance);
        prop_assert_eq!(d.estimated_ttft, e.ttft);
        prop_assert_eq!(d.best_prefix_blocks, e.best_prefix);
        // a migration is emitted exactly when the chosen instance takes the remote branch
        prop_assert_eq!(d.migrate_from(), e.remote.then_some(e.best_instance));
    }

    #[test]
    fn accepted_decisions_meet_both_bounds(seed in any::<u64>(), l_ttft in 1.0f64..20_000.0, l_tbt in 10.0f64..200.0) {
        let s = random_state(seed);
        let slo = SloConfig::fixed(l_ttft, l_tbt);
        let req = ScheduleInput { input_len: s.input_len, blocks: &s.blocks };
        let d = schedule(req, &s.prefill, &s.decode, &slo, &s.cfg, &s.perf, NOW).unwrap();
        if d.is_accepted() {
            prop_assert!(d.estimated_ttft <= l_ttft && d.estimated_tbt <= l_tbt);
        } else {
            prop_assert!(d.estimated_ttft > l_ttft || d.estimated_tbt > l_tbt);
        }
    }

    #[test]
    fn raising_threshold_never_adds_a_migration(seed in any::<u64>(), bump in 0.0f64..5.0) {
        let s = random_state(seed);
        let slo = SloConfig::fixed(f64::INFINITY, f64::INFINITY);
        let req = ScheduleInput { input_len: s.input_len, blocks: &s.blocks };
        let low = schedule(req, &s.prefill, &s.decode, &slo, &s.cfg, &s.perf, NOW).unwrap();
        let high_cfg = ConductorConfig {
            kvcache_balancing_threshold: s.cfg.kvcache_balancing_threshold + bump,
            ..s.cfg
        };
        let high = schedule(req, &s.prefill, &s.decode, &slo, &high_cfg, &s.perf, NOW).unwrap();
        prop_assert!(high.migrate_from().is_none() || low.migrate_from().is_some());
    }

    #[test]
    fn decode_choice_is_least_tbt(seed in any::<u64>(), kv in 1u64..50_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = random_decode_pool(&mut rng);
        let perf = PerfModelParams::dummy_70b();
        let (id, tbt) = select_decoding_instance(&pool, kv, &perf).unwrap();
        for d in &pool {
            let b = d.batch.len() + 1;
            let k: u64 = d.batch.iter().map(|s| s.kv_tokens).sum::<u64>() + kv;
            let t = perf.gamma_decode + perf.delta_decode * b as f64 + perf.epsilon_decode * k as f64 / 1000.0;
            prop_assert!(tbt <= t);
            if d.id < id {
                prop_assert!(t > tbt);
            }
        }
    }
}

#[test]
fn replication_spreads_the_hot_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut migrations = 0;
    for seed in 0..3000u64 {
        let mut s = random_state(seed);
        // replicas need room next to the destination's own prefix
        for inst in &mut s.prefill {
            if inst.cache.capacity().is_some() {
                inst.cache = kvsched::kvcache::CachePool::unbounded(inst.cache.policy());
                let n = rng.random_range(0..s.blocks.len());
                inst.cache.admit_and_touch(&s.blocks[..n], 1);
            }
        }
        let slo = SloConfig::fixed(f64::INFINITY, f64::INFINITY);
        let req = ScheduleInput {
            input_len: s.input_len,
            blocks: &s.blocks,
        };
        let d = schedule(req, &s.prefill, &s.decode, &slo, &s.cfg, &s.perf, NOW).unwrap();
        let Outcome::Accept {
            prefill,
            migrate_from: Some(src),
            ..
        } = d.outcome
        else {
            continue;
        };
        migrations += 1;
        let (before, _) = find_best_prefix_match(&s.prefill, &s.blocks).unwrap();
        let range = s.blocks[d.local_prefix_blocks..d.best_prefix_blocks].to_vec();
        let plan = plan_migration(&mut s.prefill[src], prefill, &range, d.local_prefix_blocks as u32, 1, &s.perf, NOW)
            .unwrap()
            .expect("non-empty range");
        apply_migration(&mut s.prefill[prefill], &plan, 10);
        let (after, _) = find_best_prefix_match(&s.prefill, &s.blocks).unwrap();
        assert!(after >= before, "seed {seed}: best prefix shrank {before} -> {after}");
        let holders = s
            .prefill
            .iter()
            .filter(|i| kvsched::kvcache::match_prefix(&i.cache, &s.blocks) >= before)
            .count();
        assert!(holders >= 2, "seed {seed}: only {holders} instance holds {before} blocks");
    }
    assert!(migrations > 100, "only {migrations} migrations exercised");
}

#[test]
fn migration_from_evicted_source_aborts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let chain: Vec<BlockKey> = (0..4).map(BlockKey).collect();
    let mut pool = random_prefill_pool(&mut rng, 2, &chain, NOW);
    let missing = [BlockKey(777_777)];
    let err = plan_migration(&mut pool[0], 1, &missing, 0, 512, &PerfModelParams::dummy_70b(), NOW).unwrap_err();
    assert!(matches!(err, kvsched::Error::MigrationAborted { block: 777_777, .. }));
}
