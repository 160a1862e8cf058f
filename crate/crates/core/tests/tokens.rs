use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use markbench::tokens::{empirical_entropy, next_dist, prefix_specify, sample, Profile, Prompt, Segment, TokenSeq, ToyModel};

fn model() -> impl Strategy<Value = ToyModel> {
    let profile = prop_oneof![
        Just(Profile::Uniform),
        (0.05f64..0.95).prop_map(Profile::Constant),
        (1usize..6, 0.05f64..0.5, 0.5f64..0.95).prop_map(|(order, lo, hi)| Profile::SeededHash { order, lo, hi }),
        prop::collection::vec((1usize..6, 0.05f64..0.95), 1..4)
            .prop_map(|s| Profile::Piecewise(s.into_iter().map(|(len, p)| Segment { len, p }).collect())),
    ];
    (profile, 0.0f64..0.2, 1usize..200, any::<u64>()).prop_map(|(p, stop, max_len, seed)| ToyModel::new(p, stop, max_len, seed).unwrap())
}

fn bits(max: usize) -> impl Strategy<Value = TokenSeq> {
    prop::collection::vec(any::<bool>(), 0..max).prop_map(TokenSeq::from_bits)
}

proptest! {
    #[test]
    fn text_form_round_trips(t in bits(100), terminated in any::<bool>()) {
        let t = t.with_terminated(terminated);
        prop_assert_eq!(t.to_string().parse::<TokenSeq>().unwrap(), t.clone());
        let json = serde_json::to_string(&t).unwrap();
        prop_assert_eq!(serde_json::from_str::<TokenSeq>(&json).unwrap(), t);
    }

    #[test]
    fn samples_respect_the_cap(m in model(), q in bits(20), seed in any::<u64>()) {
        let q = Prompt::new(q).unwrap();
        let t = sample(&m, &q, &mut ChaCha20Rng::seed_from_u64(seed));
        prop_assert!(t.is_terminated());
        prop_assert!(t.len() <= m.max_len());
        prop_assert_eq!(t.clone(), sample(&m, &q, &mut ChaCha20Rng::seed_from_u64(seed)));
        prop_assert!(empirical_entropy(&m, &q, &t).unwrap().is_finite());
    }

    #[test]
    fn entropy_adds_along_a_split(m in model(), q in bits(10), t in bits(60), cut in 0usize..60) {
        let q = Prompt::new(q).unwrap();
        let t = t.slice(0..t.len().min(m.max_len()));
        let cut = cut.min(t.len());
        let (head, tail) = (t.slice(0..cut), t.slice(cut..t.len()));
        let whole = empirical_entropy(&m, &q, &t).unwrap();
        let split = empirical_entropy(&m, &q, &head).unwrap()
            + empirical_entropy(&m, &prefix_specify(&q, &head).unwrap(), &tail).unwrap();
        prop_assert!((whole - split).abs() <= 1e-9 * whole.max(1.0));
    }

    #[test]
    fn prefix_specification_is_concatenation(q in bits(20), a in bits(20), b in bits(20)) {
        let q = Prompt::new(q).unwrap();
        let ab = a.concat(&b).unwrap();
        let left = prefix_specify(&prefix_specify(&q, &a).unwrap(), &b).unwrap();
        prop_assert_eq!(left.clone(), prefix_specify(&q, &ab).unwrap());
        prop_assert_eq!(left.len(), q.len() + a.len() + b.len());
    }

    #[test]
    fn next_dist_is_a_distribution(m in model(), q in bits(20), t in bits(20)) {
        let d = next_dist(&m, &Prompt::new(q).unwrap(), &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&d.p1));
        prop_assert!((0.0..=1.0).contains(&d.p_stop));
    }
}
