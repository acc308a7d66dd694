mod common;

use proptest::prelude::*;

use alope::checkpoint::{CheckpointKind, Container, NamedTensor};
use alope::data::dump::EmbeddingDump;
use alope::data::{NormMode, ScoreRange, ScoreTransform, Tokenizer};
use alope::eval::{pearson, spearman, williams_test, Tails, WilliamsInput};
use alope::transformer::LayerIndex;
use alope::{Graph, Tensor};
use common::{brute_pearson, brute_spearman};

fn paired(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-5i32..5, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(-1e3f64..1e3, n),
        )
    })
}

proptest! {
    #[test]
    fn spearman_matches_brute_force_and_is_symmetric((a, b) in paired(40)) {
        match spearman(&a, &b) {
            Ok(r) => {
                prop_assert!((r - brute_spearman(&a, &b)).abs() <= 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert_eq!(r.to_bits(), spearman(&b, &a).unwrap().to_bits());
            }
            Err(_) => prop_assert!(brute_spearman(&a, &b).is_nan()),
        }
    }

    #[test]
    fn pearson_matches_brute_force((a, b) in paired(40)) {
        if let Ok(r) = pearson(&a, &b) {
            prop_assert!((r - brute_pearson(&a, &b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn williams_is_antisymmetric(r12 in -0.9f64..0.9, r13 in -0.9f64..0.9, r23 in 0.0f64..0.9, n in 10usize..500) {
        let ab = williams_test(WilliamsInput { r12, r13, r23, n }, Tails::Two);
        let ba = williams_test(WilliamsInput { r12: r13, r13: r12, r23, n }, Tails::Two);
        match (ab, ba) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x.t, -y.t);
                prop_assert_eq!(x.p.to_bits(), y.p.to_bits());
                prop_assert!((0.0..=1.0).contains(&x.p));
            }
            (Err(_), Err(_)) => {}
            (x, y) => prop_assert!(false, "asymmetric failure: {:?} vs {:?}", x, y),
        }
    }

    #[test]
    fn score_transform_round_trips(scores in prop::collection::vec(0.0f64..100.0, 2..30), mode in 0usize..3) {
        let mode = [NormMode::None, NormMode::Minmax, NormMode::Zscore][mode];
        if let Ok(t) = ScoreTransform::fit(mode, &scores, ScoreRange::DA) {
            for &s in &scores {
                prop_assert!((t.inverse(t.forward(s)) - s).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-300.0f64..300.0, 1..20)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(v));
        let s = g.softmax(x).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(s).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn dump_round_trips(n in 1usize..12, hidden in 1usize..6, mask in 1u8..=255, seed in any::<u64>()) {
        let layers: Vec<usize> = (0..8).filter(|l| mask & (1 << l) != 0).collect();
        let mut r = common::rng(seed);
        let data: Vec<f32> = (0..n * layers.len() * hidden).map(|_| rand::Rng::gen_range(&mut r, -5.0..5.0)).collect();
        let targets: Vec<f64> = (0..n).map(|i| i as f64 * 1.5).collect();
        let pairs: Vec<String> = (0..n).map(|i| ["b", "a", "c"][i % 3].to_string()).collect();
        let dump = EmbeddingDump::new(8, layers.clone(), hidden, data, targets, &pairs).unwrap();
        let back = EmbeddingDump::from_bytes(&dump.to_bytes()).unwrap();
        prop_assert_eq!(&back, &dump);
        for (i, p) in pairs.iter().enumerate() {
            prop_assert_eq!(back.pair_of(i), p.as_str());
        }
        let last = *layers.last().unwrap();
        prop_assert_eq!(back.resolve(LayerIndex(last as i64 - 8)).unwrap(), last);
    }

    #[test]
    fn container_round_trips(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 0..5), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.iter().product();
                NamedTensor {
                    name: format!("t{i}"),
                    trainable: i % 2 == 0,
                    tensor: Tensor::new(s.clone(), (0..n).map(|_| rand::Rng::gen::<f32>(&mut r)).collect()).unwrap(),
                }
            })
            .collect();
        let c = Container { kind: CheckpointKind::Adapter, meta: serde_json::json!({"seed": seed}), tensors };
        let bytes = c.to_bytes();
        prop_assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        for cut in [0, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(Container::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn tokenizer_round_trips_unicode(corpus in prop::collection::vec(".{0,30}", 1..6), text in ".{0,40}") {
        let tok = Tokenizer::train(&corpus, 300).unwrap();
        let ids = tok.encode(&text);
        prop_assert!(ids.iter().all(|&i| (i as usize) < tok.vocab_size()));
        prop_assert_eq!(tok.decode(&ids), text);
    }

    #[test]
    fn negative_layers_count_from_the_top(n in 1usize..40, k in 1i64..40) {
        let r = LayerIndex(-k).resolve(n);
        if k as usize <= n {
            prop_assert_eq!(r.unwrap(), n - k as usize);
        } else {
            prop_assert!(r.is_err());
        }
    }
}
