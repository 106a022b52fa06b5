//! Corpus BLEU and chrF against values produced by sacreBLEU 2.4.0 with the
//! signatures in `ctxprobe::metrics`.

use ctxprobe::metrics::{bleu, chrf};
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Row {
    hyp: String,
    #[serde(rename = "ref")]
    reference: String,
}

fn desk() -> (Vec<String>, Vec<String>) {
    let text = include_str!("data/metric_desk.jsonl");
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<Row>(l).unwrap())
        .map(|r| (r.hyp, r.reference))
        .unzip()
}

fn s(x: &str) -> Vec<String> {
    vec![x.to_string()]
}

const TOL: f64 = 1e-9;

fn check(h: &[String], r: &[String], want_bleu: f64, want_chrf: f64) {
    let b = bleu(h, r).unwrap().value;
    let c = chrf(h, r).unwrap().value;
    assert!((b - want_bleu).abs() < TOL, "bleu {b} vs {want_bleu}");
    assert!((c - want_chrf).abs() < TOL, "chrf {c} vs {want_chrf}");
}

#[test]
fn desk_corpus() {
    let (h, r) = desk();
    assert_eq!(h.len(), 60);
    check(&h, &r, 63.931785616712574, 76.89114846315533);
    check(&h[..20], &r[..20], 59.89388637957693, 73.79278580194756);
    check(&h[8..], &r[8..], 61.59974041002803, 74.9623687133672);
}

#[test]
fn single_segments() {
    check(
        &s("Es war da, und es blieb."),
        &s("Es war hier, und es blieb dort."),
        37.70794596593207,
        52.08414034577583,
    );
    check(&s("a b"), &s("a b c d e f"), 13.533528323661276, 31.25);
    check(
        &s("The cat sat on the mat."),
        &s("The cat is on the mat."),
        48.892302243490086,
        67.17273492330233,
    );
    check(
        &s("3.20 Euro - 1,50"),
        &s("3.20 Euro-1,50"),
        15.97357760615681,
        100.0,
    );
    check(&s("x"), &s("y"), 0.0, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corpus_scores_ignore_pair_order(seed in any::<u64>()) {
        let (mut h, mut r) = desk();
        let b0 = bleu(&h, &r).unwrap().value;
        let c0 = chrf(&h, &r).unwrap().value;
        let mut order: Vec<usize> = (0..h.len()).collect();
        let mut x = seed | 1;
        for i in (1..order.len()).rev() {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            order.swap(i, (x % (i as u64 + 1)) as usize);
        }
        h = order.iter().map(|&i| h[i].clone()).collect();
        r = order.iter().map(|&i| r[i].clone()).collect();
        prop_assert!((bleu(&h, &r).unwrap().value - b0).abs() < 1e-9);
        prop_assert!((chrf(&h, &r).unwrap().value - c0).abs() < 1e-9);
    }

    #[test]
    fn scores_stay_in_range(h in "[a-zA-Z ,.]{0,40}", r in "[a-zA-Z ,.]{1,40}") {
        let b = bleu(&s(&h), &s(&r)).unwrap().value;
        let c = chrf(&s(&h), &s(&r)).unwrap().value;
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        prop_assert!((0.0..=100.0 + 1e-9).contains(&c));
    }
}
