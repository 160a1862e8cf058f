use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use markbench::analysis::{bigram_counts, chi_square_homogeneity};
use markbench::tokens::{empirical_entropy, prefix_specify, sample, Profile, Prompt, Segment, TokenSeq, ToyModel};
use markbench::zerobit::{
    blocks_parse, detect0, detect_report, generate, keygen0, normalized_hamming, wat0, ApproxRelation, BlockPolicy,
    GenLimits, CONTEXT_LEN,
};

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn random_text(len: usize, r: &mut ChaCha20Rng) -> TokenSeq {
    TokenSeq::from_bits((0..len).map(|_| r.gen()))
}

fn hash_model(seed: u64, max_len: usize) -> ToyModel {
    ToyModel::new(
        Profile::SeededHash {
            order: 4,
            lo: 0.15,
            hi: 0.85,
        },
        0.002,
        max_len,
        seed,
    )
    .unwrap()
}

#[test]
fn no_false_positives_on_random_strings() {
    let mut r = rng(1);
    // Strings are drawn before the keys they are tested against.
    let texts: Vec<TokenSeq> = (0..100_000)
        .map(|_| {
            let len = r.gen_range(0..=2000);
            random_text(len, &mut r)
        })
        .collect();
    let hits = texts.iter().filter(|t| detect0(&keygen0(16, &mut r).unwrap(), t)).count();
    assert_eq!(hits, 0);
}

#[test]
fn marked_output_is_detected() {
    let mut r = rng(2);
    let model = ToyModel::uniform(1200);
    let q = Prompt::empty();
    let (mut full_misses, mut block_misses) = (0, 0);
    for _ in 0..1000 {
        let key = keygen0(8, &mut r).unwrap();
        let g = generate(&key, &model, &key.policy(), &q, &mut r, GenLimits::NONE);
        assert!(g.blocks.len() >= 2);
        full_misses += usize::from(!detect0(&key, &g.text));
        // One verbatim block carries its own seed context.
        let b = &g.blocks[r.gen_range(0..g.blocks.len())];
        block_misses += usize::from(!detect0(&key, &g.text.slice(b.range.clone())));
    }
    assert!(full_misses <= 10, "{full_misses} misses on full outputs");
    assert!(block_misses <= 10, "{block_misses} misses on single blocks");
}

#[test]
fn report_names_a_window_inside_the_text() {
    let mut r = rng(3);
    let key = keygen0(8, &mut r).unwrap();
    let t = wat0(&key, &ToyModel::uniform(1500), &Prompt::empty(), &mut r);
    let rep = detect_report(&key, &t);
    assert!(rep.marked);
    let [a, b] = rep.window.unwrap();
    assert!(CONTEXT_LEN <= a && a < b && b <= t.len());
    assert!(rep.best_score >= rep.threshold.unwrap());
    let json = serde_json::to_value(&rep).unwrap();
    for field in ["marked", "best_score", "window", "threshold"] {
        assert!(json.get(field).is_some());
    }
}

#[test]
fn generation_contexts_are_unpredictable() {
    // An adversary who saw earlier outputs under other keys enumerates every
    // context in them; fresh generations never evaluate the PRF there.
    let mut r = rng(4);
    let model = hash_model(9, 1500);
    let q = Prompt::empty();
    let mut seen: HashSet<u64> = HashSet::new();
    for _ in 0..1000 {
        let key = keygen0(8, &mut r).unwrap();
        let g = generate(&key, &model, &key.policy(), &q, &mut r, GenLimits::NONE);
        let used = g.prf_contexts(&q);
        assert!(used.iter().all(|c| !seen.contains(c)));
        let bits = g.text.as_bytes();
        let mut ctx = 0u64;
        for (j, &b) in bits.iter().enumerate() {
            if j >= CONTEXT_LEN {
                seen.insert(ctx);
            }
            ctx = (ctx << 1) | u64::from(b);
        }
    }
}

#[test]
fn fresh_key_bigrams_match_plain_sampling() {
    let mut r = rng(5);
    let model = hash_model(10, 2000);
    let q = Prompt::empty();
    let marked: Vec<TokenSeq> = (0..10_000)
        .map(|_| {
            let key = keygen0(8, &mut r).unwrap();
            wat0(&key, &model, &q, &mut r)
        })
        .collect();
    let plain: Vec<TokenSeq> = (0..10_000).map(|_| sample(&model, &q, &mut r)).collect();
    let chi = chi_square_homogeneity(&bigram_counts(&marked), &bigram_counts(&plain)).unwrap();
    assert!(chi.p_value > 1e-3, "{chi:?}");
}

#[test]
fn zero_entropy_model_never_completes_a_block() {
    let model = ToyModel::new(Profile::Constant(1.0), 0.0, 500, 0).unwrap();
    let mut r = rng(6);
    let key = keygen0(8, &mut r).unwrap();
    let g = generate(&key, &model, &key.policy(), &Prompt::empty(), &mut r, GenLimits::NONE);
    assert!(g.blocks.is_empty());
    assert_eq!(g.text, sample(&model, &Prompt::empty(), &mut r));
}

fn piecewise_model() -> impl Strategy<Value = ToyModel> {
    prop::collection::vec((1usize..8, 0.0f64..=1.0), 1..5).prop_map(|segs| {
        let segs = segs.into_iter().map(|(len, p)| Segment { len, p }).collect();
        ToyModel::new(Profile::Piecewise(segs), 0.0, 1000, 0).unwrap()
    })
}

proptest! {
    #[test]
    fn parse_yields_minimal_blocks(
        model in piecewise_model(),
        bits in prop::collection::vec(any::<bool>(), 0..64),
        prompt in prop::collection::vec(any::<bool>(), 0..8),
        threshold in 0.5f64..6.0,
    ) {
        let q = Prompt::new(TokenSeq::from_bits(prompt)).unwrap();
        let policy = BlockPolicy::new(threshold, 1.0, 1.0).unwrap();
        let t = TokenSeq::from_bits(bits);
        let parsed = blocks_parse(&model, &policy, &q, &t);
        let mut at = 0;
        let entropy = |from: usize, to: usize| {
            let ctx = prefix_specify(&q, &t.slice(0..from)).unwrap();
            empirical_entropy(&model, &ctx, &t.slice(from..to)).unwrap_or(f64::INFINITY)
        };
        for b in &parsed.blocks {
            prop_assert_eq!(b.start, at);
            prop_assert!(entropy(b.start, b.end) >= threshold - 1e-9);
            prop_assert!(entropy(b.start, b.end - 1) < threshold + 1e-9);
            at = b.end;
        }
        prop_assert_eq!(parsed.remainder.clone(), at..t.len());
        prop_assert!(entropy(at, t.len()) < threshold + 1e-9);
    }

    #[test]
    fn hamming_relation_matches_definition(
        a in prop::collection::vec(0u8..2, 1..40),
        flips in prop::collection::vec(any::<bool>(), 40),
        delta in 0.0f64..0.99,
    ) {
        let b: Vec<u8> = a.iter().zip(&flips).map(|(&x, &f)| x ^ u8::from(f)).collect();
        let rel = ApproxRelation::hamming(delta).unwrap();
        prop_assert_eq!(rel.approximates(&b, &a), normalized_hamming(&a, &b) <= delta);
        prop_assert!(!rel.approximates(&b[1..], &a));
        let mut text = vec![1u8; 7];
        text.extend_from_slice(&b);
        text.extend_from_slice(&[0, 1, 1]);
        let brute = text.windows(a.len()).any(|w| rel.approximates(w, &a));
        prop_assert_eq!(rel.occurs_in(&text, &a), brute);
    }

    #[test]
    fn detection_is_deterministic(seed in any::<u64>(), len in 0usize..1500) {
        let mut r = rng(seed);
        let key = keygen0(4, &mut r).unwrap();
        let t = random_text(len, &mut r);
        prop_assert_eq!(detect_report(&key, &t), detect_report(&key, &t));
    }
}
