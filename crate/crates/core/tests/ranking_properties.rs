use proptest::prelude::*;
use vemfuse_core::eval::{filtered_rank, Direction, Metrics, RankResult, TiePolicy};
use vemfuse_core::Triple;

fn scores() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0u8..5, 2..40).prop_map(|v| v.into_iter().map(|x| x as f32).collect())
}

proptest! {
    #[test]
    fn random_rank_stays_inside_the_tie_block(s in scores(), t in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let target = t.index(s.len());
        let greater = s.iter().filter(|&&x| x > s[target]).count();
        let ties = s.iter().filter(|&&x| x == s[target]).count() - 1;
        let r = filtered_rank(&s, target, &[], TiePolicy::Random, seed).unwrap();
        prop_assert!(r >= (1 + greater) as f64 && r <= (1 + greater + ties) as f64);
        prop_assert_eq!(r.fract(), 0.0);
        let e = filtered_rank(&s, target, &[], TiePolicy::Expected, seed).unwrap();
        prop_assert_eq!(e, 1.0 + greater as f64 + ties as f64 / 2.0);
    }

    #[test]
    fn filtering_never_worsens_a_rank(s in scores(), t in any::<prop::sample::Index>(), mask in prop::collection::vec(any::<bool>(), 40)) {
        let target = t.index(s.len());
        let others: Vec<usize> = (0..s.len()).filter(|&e| e != target && mask[e]).collect();
        let open = filtered_rank(&s, target, &[], TiePolicy::Expected, 0).unwrap();
        let filtered = filtered_rank(&s, target, &others, TiePolicy::Expected, 0).unwrap();
        prop_assert!(filtered <= open);
    }

    #[test]
    fn metrics_are_always_consistent(ranks in prop::collection::vec(1u32..60, 1..80)) {
        let results: Vec<RankResult> = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| RankResult {
                triple: Triple::new(i, 0, i + 1),
                direction: if i % 2 == 0 { Direction::Tail } else { Direction::Head },
                query: (i, 0),
                target: i + 1,
                rank: r as f64,
                top_k: Vec::new(),
            })
            .collect();
        let m = Metrics::from_ranks(&results);
        prop_assert!(m.is_consistent());
        prop_assert_eq!(m.count, ranks.len());
        prop_assert_eq!(m.tail.count + m.head.count, m.count);
    }
}
