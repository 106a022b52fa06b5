use std::collections::BTreeMap;
use std::io::Write;

use ctxprobe::attribution::{
    aggregate_ap, attribution_percentage, import_attributions, write_attributions, Aggregation,
    AttributionError, AttributionVector, SpanKind, ANTECEDENT, CONTEXT, SCHEMA,
};
use proptest::prelude::*;

fn vector_strategy() -> impl Strategy<Value = AttributionVector> {
    (2usize..40)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..10.0, n),
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(scores, in_ctx, in_ante)| {
            let ctx: Vec<usize> = (0..scores.len()).filter(|&i| in_ctx[i]).collect();
            let ante: Vec<usize> = ctx.iter().copied().filter(|&i| in_ante[i]).collect();
            let tokens = (0..scores.len()).map(|i| format!("t{i}")).collect();
            let spans = BTreeMap::from([(CONTEXT.to_string(), ctx), (ANTECEDENT.to_string(), ante)]);
            AttributionVector::new("ex", tokens, scores, spans, "test").unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn partition_adds_to_hundred(v in vector_strategy(), cuts in prop::collection::vec(0usize..4, 40)) {
        prop_assume!(v.total() > 0.0);
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); 4];
        for i in 0..v.scores.len() {
            parts[cuts[i]].push(i);
        }
        let sum: f64 = parts.iter().map(|p| attribution_percentage(&v.scores, p).unwrap()).sum();
        prop_assert!((sum - 100.0).abs() <= 1e-9);
    }

    #[test]
    fn scale_invariant(v in vector_strategy(), c in 1e-3f64..1e3) {
        prop_assume!(v.total() > 0.0);
        let scaled: Vec<f64> = v.scores.iter().map(|s| s * c).collect();
        for kind in [SpanKind::Context, SpanKind::Antecedent] {
            let a = v.ap(&kind).unwrap();
            let b = attribution_percentage(&scaled, &v.indices(&kind)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn monotone_in_the_subset(v in vector_strategy(), extra in 0usize..40) {
        prop_assume!(v.total() > 0.0);
        let base = v.indices(&SpanKind::Antecedent);
        let mut grown = base.clone();
        grown.push(extra % v.scores.len());
        prop_assert!(attribution_percentage(&v.scores, &grown).unwrap() + 1e-12 >= attribution_percentage(&v.scores, &base).unwrap());
    }

    #[test]
    fn bounds_and_containment(v in vector_strategy()) {
        match v.ap(&SpanKind::Input) {
            None => prop_assert_eq!(v.total(), 0.0),
            Some(all) => {
                prop_assert!((all - 100.0).abs() <= 1e-9);
                prop_assert_eq!(attribution_percentage(&v.scores, &[]), Some(0.0));
                prop_assert!(v.ap(&SpanKind::Antecedent).unwrap() <= v.ap(&SpanKind::Context).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn ap_v1_round_trip(vs in prop::collection::vec(vector_strategy(), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let vs: Vec<AttributionVector> = vs
            .into_iter()
            .enumerate()
            .map(|(i, mut v)| { v.example_id = format!("ex{i}"); v })
            .collect();
        write_attributions(&path, &vs).unwrap();
        let imported = import_attributions(&path).unwrap();
        prop_assert!(imported.rejected.is_empty());
        prop_assert_eq!(imported.vectors, vs);
    }
}

fn record(id: &str, scores: &str, spans: &str) -> String {
    format!(
        r#"{{"schema":"{SCHEMA}","example_id":"{id}","tokens":["a","b","c"],"scores":{scores},"spans":{spans},"method":"alti"}}"#
    )
}

fn import(lines: &[String]) -> Result<ctxprobe::attribution::Imported, AttributionError> {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    import_attributions(f.path())
}

#[test]
fn import_accepts_valid_records() {
    let imported = import(&[record(
        "a",
        "[1.0, 3.0, 0.0]",
        r#"{"context":[0,1],"antecedent":[1]}"#,
    )])
    .unwrap();
    assert!(imported.rejected.is_empty());
    let v = &imported.vectors[0];
    assert_eq!(v.method, "alti");
    assert_eq!(v.ap(&SpanKind::Context), Some(100.0));
    assert_eq!(v.ap(&SpanKind::Antecedent), Some(75.0));
}

#[test]
fn import_rejects_broken_records_with_reasons() {
    let imported = import(&[
        record("neg", "[1.0, -0.5, 0.0]", r#"{"context":[0]}"#),
        record("short", "[1.0, 0.5]", r#"{"context":[0]}"#),
        record("range", "[1.0, 0.5, 0.0]", r#"{"context":[0, 7]}"#),
        record(
            "outside",
            "[1.0, 0.5, 0.0]",
            r#"{"context":[0],"antecedent":[2]}"#,
        ),
        record("negidx", "[1.0, 0.5, 0.0]", r#"{"context":[-1]}"#),
        record("ok", "[1.0, 0.5, 0.0]", r#"{"context":[0]}"#),
        "not json".to_string(),
    ])
    .unwrap();
    assert_eq!(imported.vectors.len(), 1);
    assert_eq!(imported.vectors[0].example_id, "ok");
    let ids: Vec<_> = imported
        .rejected
        .iter()
        .map(|r| r.example_id.as_deref())
        .collect();
    assert_eq!(
        ids,
        [
            Some("neg"),
            Some("short"),
            Some("range"),
            Some("outside"),
            Some("negidx"),
            None
        ]
    );
    assert!(imported.rejected[0].reason.contains("non-negative"));
    assert_eq!(imported.rejected[5].line, 7);
}

#[test]
fn import_aborts_on_schema_mismatch() {
    let other = record("a", "[1.0, 0.0, 0.0]", r#"{"context":[0]}"#).replace(SCHEMA, "ap-v2");
    let err = import(&[record("x", "[1.0, 0.0, 0.0]", r#"{"context":[0]}"#), other]).unwrap_err();
    match err {
        AttributionError::Schema { line, found, .. } => {
            assert_eq!(line, 2);
            assert_eq!(found, "ap-v2");
        }
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn aggregation_modes() {
    let v = |id: &str, scores: Vec<f64>| {
        AttributionVector::new(
            id,
            vec!["a".into(), "b".into()],
            scores,
            BTreeMap::from([(CONTEXT.to_string(), vec![0])]),
            "m",
        )
        .unwrap()
    };
    let vs = [
        v("a", vec![1.0, 1.0]),
        v("b", vec![3.0, 1.0]),
        v("c", vec![0.0, 0.0]),
    ];
    let mean = aggregate_ap(&vs, &SpanKind::Context, Aggregation::MeanOfAps).unwrap();
    assert!((mean.mean_ap - 62.5).abs() < 1e-12);
    assert_eq!((mean.n_examples, mean.no_signal), (2, 1));
    let ratio = aggregate_ap(&vs, &SpanKind::Context, Aggregation::RatioOfSums).unwrap();
    assert!((ratio.mean_ap - 100.0 * 4.0 / 6.0).abs() < 1e-12);
    assert!(matches!(
        aggregate_ap(&vs[2..], &SpanKind::Context, Aggregation::MeanOfAps),
        Err(AttributionError::NoSignal { no_signal: 1 })
    ));
}
