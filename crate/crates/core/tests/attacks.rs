use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use markbench::attacks::{
    apply_channel, collude_word, run_adaptive, AdaptiveScript, Channel, CollusionStrategy, Marked, ZeroBitScheme,
};
use markbench::fpcode::feasible_delta;
use markbench::lbit::{Message, Symbol};
use markbench::tokens::{Prompt, TokenSeq, ToyModel};
use markbench::zerobit::{blocks_parse, keygen0, AebCondition, ApproxRelation};

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

const STRATEGIES: [CollusionStrategy; 5] = [
    CollusionStrategy::BlockSplice,
    CollusionStrategy::BitMajority,
    CollusionStrategy::BitMinority,
    CollusionStrategy::UniformPick,
    CollusionStrategy::CoinInterleave,
];

#[test]
fn uniform_pick_stays_feasible() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let rows: Vec<Message> = (0..3).map(|_| Message::random(12, &mut r)).collect();
        let y = collude_word(CollusionStrategy::UniformPick, &rows, 0.25, &mut r).unwrap();
        assert!(feasible_delta(&y, &rows, 0.25));
    }
}

#[test]
fn lone_colluder_outputs_own_codeword() {
    let mut r = rng(2);
    let x = Message::random(30, &mut r);
    for s in STRATEGIES {
        let y = collude_word(s, std::slice::from_ref(&x), 0.2, &mut r).unwrap();
        assert_eq!(y.count(Symbol::Erased), 6);
        for (i, sym) in y.symbols().iter().enumerate() {
            assert!(sym.bit().is_none_or(|b| b == x.bit(i)));
        }
    }
}

#[test]
fn transcript_records_every_query_in_order() {
    let mut r = rng(3);
    let model = ToyModel::uniform(300);
    let oracle = Marked {
        key: keygen0(8, &mut r).unwrap(),
        model: model.clone(),
    };
    // Each prompt is the previous answer's length in unary.
    let mut script = AdaptiveScript::new(|tr, _| Ok(tr.entries().last().unwrap().1.clone()));
    for _ in 0..5 {
        script = script.step(|tr| {
            let n = tr.entries().last().map_or(0, |(_, t)| t.len() % 7);
            Prompt::new(TokenSeq::from_bits(std::iter::repeat_n(true, n))).unwrap()
        });
    }
    let (tr, t_hat) = run_adaptive(&script, &oracle, &mut r).unwrap();
    assert_eq!(tr.len(), 5);
    assert_eq!(&tr.entries()[4].1, &t_hat);
    for w in tr.entries().windows(2) {
        assert_eq!(w[1].0.len(), w[0].1.len() % 7);
    }
    let (tr, t_hat) = run_adaptive(&AdaptiveScript::single_query(Prompt::empty()), &oracle, &mut r).unwrap();
    assert_eq!(tr.len(), 1);
    assert_eq!(tr.entries()[0].1, t_hat);
}

#[test]
fn splice_across_queries_counts_both_entries() {
    let mut r = rng(4);
    let model = ToyModel::uniform(2000);
    let key = keygen0(8, &mut r).unwrap();
    let policy = key.policy();
    let piece = policy.entropy_threshold as usize;
    let oracle = Marked { key, model: model.clone() };
    let (tr, t_hat) = run_adaptive(&AdaptiveScript::splice_two(Prompt::empty(), piece), &oracle, &mut r).unwrap();
    assert_eq!(tr.len(), 2);
    let aeb = AebCondition::new(&model, &policy, ApproxRelation::Equality);
    for (q, t) in tr.entries() {
        assert_eq!(blocks_parse(&model, &policy, q, t).blocks[0], 0..piece);
        assert_eq!(aeb.num_blocks(&t_hat, q, t), 1);
    }
    assert!(aeb.r_k(&tr, &t_hat, 2).unwrap());
    assert!(!aeb.r_k(&tr, &t_hat, 3).unwrap());
    assert!(oracle.detect(&t_hat));
}

fn channel() -> impl Strategy<Value = Channel> {
    prop_oneof![
        (0.0f64..0.9).prop_map(Channel::Substitute),
        (0.0f64..0.9).prop_map(Channel::Delete),
        Just(Channel::ShuffleBlocks),
        prop::collection::vec(any::<bool>(), 0..200).prop_map(|b| Channel::Interleave(TokenSeq::from_bits(b))),
    ]
}

proptest! {
    #[test]
    fn channels_replay(ch in channel(), seed in any::<u64>(), len in 0usize..600) {
        let mut r = rng(seed);
        let t = TokenSeq::from_bits((0..len).map(|_| r.gen()));
        let blocks: Vec<_> = (0..len / 100).map(|i| i * 100..i * 100 + 80).collect();
        let a = apply_channel(&ch, &t, &blocks, &mut rng(seed ^ 1)).unwrap();
        let b = apply_channel(&ch, &t, &blocks, &mut rng(seed ^ 1)).unwrap();
        prop_assert_eq!(&a, &b);
        let (out, stats) = a;
        prop_assert_eq!(stats.len_out, out.len());
        match ch {
            Channel::Substitute(_) => prop_assert_eq!(out.len(), len),
            Channel::Delete(_) => prop_assert!(out.len() <= len),
            Channel::ShuffleBlocks => prop_assert_eq!(stats.blocks_retained, blocks.len()),
            Channel::Interleave(ref f) => {
                prop_assert_eq!(out.len(), f.len() + 80 * blocks.len());
                prop_assert_eq!(stats.blocks_retained, blocks.len());
            }
            Channel::Crop(_) => {}
        }
    }

    #[test]
    fn bit_strategies_are_feasible(c in 1usize..5, len in 1usize..40, delta in 0.0f64..0.9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let rows: Vec<Message> = (0..c).map(|_| Message::random(len, &mut r)).collect();
        for s in STRATEGIES {
            let y = collude_word(s, &rows, delta, &mut r).unwrap();
            prop_assert!(feasible_delta(&y, &rows, delta));
            let twins = [rows[0].clone(), rows[0].clone()];
            let y = collude_word(s, &twins, delta, &mut r).unwrap();
            for (i, sym) in y.symbols().iter().enumerate() {
                prop_assert!(sym.bit().is_none_or(|b| b == rows[0].bit(i)));
            }
        }
    }
}
