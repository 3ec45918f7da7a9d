use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidqa::metrics::{
    align, bleu, brevity_penalty, evaluate_corpus, meteor_from_alignment, meteor_lite, modified_precision,
    Alignment,
};
use vidqa::tokenizer::normalize;

/// Tries every one-to-one alignment of equal tokens, maximal or not.
fn brute_force_alignment(c: &[u32], r: &[u32]) -> Alignment {
    fn go(c: &[u32], r: &[u32], i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut Alignment) {
        if i == c.len() {
            let m = pairs.len();
            let chunks = (0..m)
                .filter(|&k| k == 0 || !(pairs[k].0 == pairs[k - 1].0 + 1 && pairs[k].1 == pairs[k - 1].1 + 1))
                .count();
            if m > best.matches || (m == best.matches && chunks < best.chunks) {
                *best = Alignment { matches: m, chunks };
            }
            return;
        }
        go(c, r, i + 1, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                pairs.push((i, j));
                go(c, r, i + 1, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = Alignment { matches: 0, chunks: 0 };
    go(c, r, 0, &mut vec![false; r.len()], &mut vec![], &mut best);
    best
}

#[test]
fn meteor_matches_brute_force_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let alphabet = rng.random_range(2..6u32);
        let c: Vec<u32> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(0..alphabet)).collect();
        let r: Vec<u32> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..alphabet)).collect();
        let want = brute_force_alignment(&c, &r);
        assert_eq!(align(&c, &r), want, "{c:?} {r:?}");
        assert_eq!(meteor_lite(&c, &r), meteor_from_alignment(want, c.len(), r.len()));
    }
}

#[test]
fn meteor_spec_cases() {
    let t = |s: &str| normalize(s);
    assert_eq!(meteor_lite(&t("a b"), &t("c d")), 0.0);
    let x = t("one two three four");
    assert!((meteor_lite(&x, &x) - 127.0 / 128.0).abs() < 1e-15);
    // "the cat sat" vs "sat the cat": 3 matches in 2 chunks, P = R = 1.
    let a = align(&t("the cat sat"), &t("sat the cat"));
    assert_eq!(a, Alignment { matches: 3, chunks: 2 });
    assert!((meteor_lite(&t("the cat sat"), &t("sat the cat")) - (1.0 - 0.5 * (2.0f64 / 3.0).powi(3))).abs() < 1e-15);
}

#[test]
fn bleu_spec_cases() {
    let c = vec![normalize("the the the the the the the")];
    let r = vec![normalize("the cat is on the mat")];
    assert_eq!(modified_precision(&c, &r, 1), (2, 7));
    assert_eq!(bleu(&c, &r, 1, false).unwrap(), 2.0 / 7.0);

    let c = vec![normalize("one two three four five")];
    let r = vec![normalize("one two three five four")];
    assert_eq!(bleu(&c, &r, 4, false).unwrap(), 0.0);
    assert!(bleu(&c, &r, 4, true).unwrap() > 0.0);
}

fn sentences() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..8)
}

proptest! {
    #[test]
    fn bleu_one_matches_brute_force_counts(pairs in prop::collection::vec((sentences(), sentences()), 1..5)) {
        let (c, r): (Vec<Vec<u8>>, Vec<Vec<u8>>) = pairs.into_iter().unzip();
        let (matched, total) = modified_precision(&c, &r, 1);
        let mut want = 0;
        for (cand, reference) in c.iter().zip(&r) {
            for tok in 0u8..5 {
                let in_c = cand.iter().filter(|&&x| x == tok).count();
                let in_r = reference.iter().filter(|&&x| x == tok).count();
                want += in_c.min(in_r);
            }
        }
        prop_assert_eq!(matched, want);
        prop_assert_eq!(total, c.iter().map(Vec::len).sum::<usize>());
    }

    #[test]
    fn scores_lie_in_unit_interval(c in sentences(), r in sentences(), n in 1usize..5, smooth: bool) {
        let b = bleu(&[c.clone()], &[r.clone()], n, smooth).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        let m = meteor_lite(&c, &r);
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn identity_scores(x in prop::collection::vec(0u8..5, 1..8), n in 1usize..6) {
        prop_assert!((bleu(&[x.clone()], &[x.clone()], n, false).unwrap() - 1.0).abs() < 1e-12);
        let l = x.len() as f64;
        prop_assert_eq!(meteor_lite(&x, &x), 1.0 - 0.5 / (l * l * l));
    }

    #[test]
    fn shortening_never_raises_brevity_penalty(r in 1usize..40, c in 1usize..40) {
        let shorter = c.saturating_sub(1);
        prop_assert!(brevity_penalty(shorter, r) <= brevity_penalty(c, r));
    }
}

fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, Vec<String>> {
    pairs.iter().map(|(q, t)| (q.to_string(), normalize(t))).collect()
}

#[test]
fn corpus_report_matches_hand_computation() {
    let gold = map(&[("q1", "a man is walking"), ("q2", "happy"), ("q3", "he went to the park")]);
    let gen = map(&[("q1", "a man walking"), ("q2", "sad"), ("q3", "went to the park")]);
    let r = evaluate_corpus(&gen, &gold).unwrap();
    // c = 8, r = 10. Clipped matches per order: 7/8, 4/5, 2/3, 1/1.
    let bp = (1.0f64 - 10.0 / 8.0).exp();
    assert!((r.bleu1 - bp * 7.0 / 8.0).abs() < 1e-12);
    let geo = (7.0f64 / 8.0 * 4.0 / 5.0 * 2.0 / 3.0 * 1.0).powf(0.25);
    assert!((r.bleu4 - bp * geo).abs() < 1e-12);
    // q1: m 3, 2 chunks, P 1, R 3/4. q2: 0. q3: m 4, 1 chunk, P 1, R 4/5.
    let m1 = (7.5 / 9.75) * (1.0 - 0.5 * (2.0f64 / 3.0).powi(3));
    let m3 = (8.0 / 9.8) * (1.0 - 0.5 / 64.0);
    assert!((r.meteor - (m1 + m3) / 3.0).abs() < 1e-12);
    assert_eq!(r.counts.examples, 3);
    assert_eq!(r.counts.candidate_tokens, 8);
    assert_eq!(r.counts.reference_tokens, 10);
    assert_eq!(r.per_example[1].meteor, 0.0);
}

#[test]
fn corpus_edge_cases() {
    let gold = map(&[("q1", "a man is walking"), ("q2", "happy")]);
    let same = evaluate_corpus(&gold, &gold).unwrap();
    assert_eq!((same.bleu1, same.bleu4), (1.0, 1.0));

    let none = evaluate_corpus(&BTreeMap::new(), &gold).unwrap();
    assert_eq!((none.bleu1, none.bleu4, none.meteor), (0.0, 0.0, 0.0));
    assert_eq!((none.counts.generated, none.counts.candidate_tokens, none.counts.missing), (0, 0, 2));

    let empty = evaluate_corpus(&BTreeMap::new(), &BTreeMap::new()).unwrap();
    assert_eq!(empty.counts, Default::default());

    let stray = map(&[("q9", "x")]);
    match evaluate_corpus(&stray, &gold) {
        Err(vidqa::Error::UnknownQid(q)) => assert_eq!(q, vec!["q9".to_string()]),
        other => panic!("{other:?}"),
    }
}
