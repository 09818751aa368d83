use metaxl_core::data::TaskKind;
use metaxl_core::data::{
    generate_pair, parse_sequence_labeled, parse_token_labeled, write_sequence_labeled,
    write_token_labeled, ExampleLabels, SyntheticTaskSpec, TagSet,
};
use proptest::prelude::*;

fn small_spec(seed: u64, shift: f64, task: TaskKind) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        task_kind: task,
        n_labels: if task == TaskKind::TokenLabeling {
            5
        } else {
            2
        },
        shift,
        source_n: 40,
        target_train_n: 10,
        target_dev_n: 10,
        target_test_n: 10,
        seed,
        ..SyntheticTaskSpec::default()
    }
}

#[test]
fn generated_examples_fit_the_desk_encoder() {
    for task in [TaskKind::TokenLabeling, TaskKind::SequenceClassification] {
        let pair = generate_pair(&small_spec(1, 0.5, task)).unwrap();
        for ds in [
            &pair.source,
            &pair.target_train,
            &pair.target_dev,
            &pair.target_test,
        ] {
            assert!(ds.examples.iter().all(|e| e.tokens.len() <= 32));
            ds.validate().unwrap();
        }
    }
}

#[test]
fn exported_token_data_reloads_identically() {
    let pair = generate_pair(&small_spec(2, 0.5, TaskKind::TokenLabeling)).unwrap();
    let tags = TagSet::standard(2);
    for ds in [&pair.source, &pair.target_test] {
        let bytes = write_token_labeled(ds, &tags).unwrap();
        let (back, report) = parse_token_labeled(&bytes, &tags, 32).unwrap();
        assert_eq!(report.bio_repairs, 0);
        assert_eq!(report.truncated_examples, 0);
        assert_eq!(back.examples, ds.examples);
    }
}

fn word() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(33u8..127, 1..4)
}

fn tag() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("O".to_string()),
        Just("B-PER".to_string()),
        Just("I-PER".to_string()),
        Just("B-LOC".to_string()),
        Just("I-LOC".to_string()),
    ]
}

fn conll_file() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(proptest::collection::vec((word(), tag()), 1..6), 1..5).prop_map(
        |sents| {
            let mut out = Vec::new();
            for (i, s) in sents.iter().enumerate() {
                if i > 0 {
                    out.push(b'\n');
                }
                for (w, t) in s {
                    out.extend_from_slice(w);
                    out.push(b'\t');
                    out.extend_from_slice(t.as_bytes());
                    out.push(b'\n');
                }
            }
            out
        },
    )
}

proptest! {
    #[test]
    fn mapping_counts_and_overlap(low in 33u16..100, width in 2u16..150, shift in 0.0f64..=1.0, seed in 0u64..50) {
        let high = (low + width).min(256);
        let v = usize::from(high - low);
        let spec = SyntheticTaskSpec { vocab_low: low, vocab_high: high, shift, seed, ..SyntheticTaskSpec::default() };
        let k = (shift * v as f64).ceil() as usize;
        match spec.mapping() {
            Ok(m) => {
                prop_assert_eq!(m.remapped.len(), k);
                prop_assert!((m.overlap() - (v - k) as f64 / v as f64).abs() < 1e-12);
                prop_assert!(m.remapped.iter().all(|(a, b)| a != b));
                let mut image: Vec<u8> = (low..high).map(|b| m.apply(b as u8)).collect();
                image.sort_unstable();
                let domain: Vec<u8> = (low..high).map(|b| b as u8).collect();
                prop_assert_eq!(image, domain);
            }
            Err(_) => prop_assert_eq!(k, 1),
        }
    }

    #[test]
    fn token_files_round_trip(f in conll_file()) {
        let tags = TagSet::standard(2);
        let (ds, _) = parse_token_labeled(&f, &tags, 64).unwrap();
        let once = write_token_labeled(&ds, &tags).unwrap();
        let (again, report) = parse_token_labeled(&once, &tags, 64).unwrap();
        prop_assert_eq!(report.bio_repairs, 0);
        prop_assert_eq!(&again, &ds);
        prop_assert_eq!(write_token_labeled(&again, &tags).unwrap(), once);
        let crlf: Vec<u8> = f.iter().flat_map(|&b| if b == b'\n' { vec![b'\r', b'\n'] } else { vec![b] }).collect();
        prop_assert_eq!(parse_token_labeled(&crlf, &tags, 64).unwrap().0, ds);
    }

    #[test]
    fn sequence_files_round_trip(rows in proptest::collection::vec((0usize..2, proptest::collection::vec(prop_oneof![9u8..10, 32u8..127], 0..20)), 1..8)) {
        let mut f = Vec::new();
        for (label, text) in &rows {
            f.extend_from_slice(label.to_string().as_bytes());
            f.push(b'\t');
            f.extend_from_slice(text);
            f.push(b'\n');
        }
        let ds = parse_sequence_labeled(&f, 64).unwrap();
        prop_assert_eq!(ds.len(), rows.len());
        for (ex, (label, _)) in ds.examples.iter().zip(&rows) {
            prop_assert_eq!(&ex.labels, &ExampleLabels::Sequence(*label));
        }
        prop_assert_eq!(write_sequence_labeled(&ds).unwrap(), f);
    }

    #[test]
    fn generation_is_deterministic(seed in 0u64..20, shift in 0.0f64..=1.0) {
        let spec = small_spec(seed, shift, TaskKind::TokenLabeling);
        let (a, b) = (generate_pair(&spec), generate_pair(&spec));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.source, b.source);
                prop_assert_eq!(a.target_test, b.target_test);
                prop_assert_eq!(a.mapping, b.mapping);
            }
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }
}
