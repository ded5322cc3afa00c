use std::path::Path;

use proptest::prelude::*;

use mfscil::cli::{RunConfig, Settings};
use mfscil::embeddings::{decode, encode, synthesize, EmbeddingDataset, ImageEmbedding, SyntheticSpec};
use mfscil::interpreter::labels::{format_labels, parse_labels};
use mfscil::interpreter::{tokenize, InterpreterConfig, PAD_ID};
use mfscil::model::ClassEmbeddingBank;
use mfscil::numerics::{softmax, RealArray, Tape};
use mfscil::protocol::{build_plan, PlanKind};
use mfscil::training::{
    consolidation_penalty, decode_checkpoint, encode_checkpoint, sgd_step, Checkpoint,
};

fn finite() -> impl Strategy<Value = f32> {
    prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO
}

fn nonzero_vector(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&RealArray::vector(v.clone()).unwrap()).unwrap();
        let total: f64 = p.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn softmax_commutes_with_permutation(v in prop::collection::vec(-50.0f64..50.0, 2..20), shift in 0usize..20) {
        let k = shift % v.len();
        let mut rotated = v.clone();
        rotated.rotate_left(k);
        let p = softmax(&RealArray::vector(v).unwrap()).unwrap();
        let q = softmax(&RealArray::vector(rotated).unwrap()).unwrap();
        let mut expected = p.data().to_vec();
        expected.rotate_left(k);
        for (a, b) in expected.iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn scores_match_loop_oracle(
        bank in prop::collection::vec(nonzero_vector(6), 1..6),
        image in nonzero_vector(6),
    ) {
        let rows: Vec<Vec<f64>> = bank.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let ids: Vec<u32> = (0..rows.len() as u32).collect();
        let b = ClassEmbeddingBank::from_parts(ids, RealArray::from_rows(&rows).unwrap()).unwrap();
        let scores = b.score(&image).unwrap();
        for (row, &s) in rows.iter().zip(&scores.similarities) {
            let mut dot = 0.0;
            let mut nm = 0.0;
            let mut ni = 0.0;
            for (m, &i) in row.iter().zip(&image) {
                dot += m * i as f64;
                nm += m * m;
                ni += (i as f64) * (i as f64);
            }
            let oracle = dot / (nm.sqrt() * ni.sqrt());
            prop_assert!((s - oracle).abs() < 1e-10, "{s} vs {oracle}");
        }
    }

    #[test]
    fn classification_ignores_image_scale(
        bank in prop::collection::vec(nonzero_vector(5), 2..6),
        image in nonzero_vector(5),
        factor in 0.01f32..100.0,
    ) {
        let rows: Vec<Vec<f64>> = bank.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let b = ClassEmbeddingBank::from_parts((0..rows.len() as u32).collect(), RealArray::from_rows(&rows).unwrap()).unwrap();
        let scaled: Vec<f32> = image.iter().map(|x| x * factor).collect();
        let a = b.score(&image).unwrap();
        let c = b.score(&scaled).unwrap();
        for (x, y) in a.similarities.iter().zip(&c.similarities) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn mfse_round_trip_is_bit_exact(
        dim in 1usize..8,
        rows in prop::collection::vec(prop::collection::vec(finite(), 8), 3..12),
    ) {
        let mut samples = Vec::new();
        for (i, v) in rows.into_iter().enumerate() {
            let mut v: Vec<f32> = v.into_iter().take(dim).collect();
            v[0] = 1.0;
            samples.push(ImageEmbedding::new(i as u32 % 3, i as u32 / 3, v));
        }
        let labels: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
        let ds = EmbeddingDataset::new(dim, samples, labels.clone()).unwrap();
        let bytes = encode(&ds);
        let back = decode(&bytes, labels, Some(dim)).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        for (a, b) in back.samples().iter().zip(ds.samples()) {
            prop_assert_eq!(a.vector().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.vector().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mfck_round_trip_is_bit_exact(
        l in 0usize..4,
        d in 1usize..5,
        session in 0usize..9,
        values in prop::collection::vec(finite(), 48),
    ) {
        let n = l * d;
        let ck = Checkpoint {
            prompt_len: l,
            dim: d,
            session,
            theta: values[..n].to_vec(),
            anchor: (session > 0).then(|| values[16..16 + n].to_vec()),
            gamma: values[32..32 + n].to_vec(),
        };
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back), bytes.clone());
        for cut in [0, bytes.len() / 2, bytes.len().saturating_sub(1)] {
            if cut < bytes.len() {
                prop_assert!(decode_checkpoint(&bytes[..cut]).is_err());
            }
        }
    }

    #[test]
    fn labels_round_trip(labels in prop::collection::vec("[a-z][a-z ]{0,12}[a-z]", 1..10)) {
        prop_assert_eq!(parse_labels(&format_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn tokens_stay_in_vocabulary(label in "[A-Za-z]{1,8}( [A-Za-z]{1,8}){0,30}", prompt_len in 0usize..60) {
        let config = InterpreterConfig::default();
        let t = tokenize(&label, &config, prompt_len).unwrap();
        prop_assert!(!t.ids().is_empty());
        prop_assert!(t.ids().len() + prompt_len <= config.max_sequence_len);
        prop_assert!(t.ids().iter().all(|&id| id != PAD_ID && (id as usize) < config.vocab_size));
    }

    #[test]
    fn custom_plans_partition_classes(
        base in 2usize..10,
        ways in 1usize..5,
        extra in 0usize..12,
        seed in any::<u64>(),
    ) {
        let classes = base + extra;
        let (_, train, _) = synthesize(&SyntheticSpec {
            classes,
            train_per_class: 2,
            test_per_class: 1,
            dim: 24,
            separation: 0.1,
            noise_std: 0.01,
            seed: 1,
        }).unwrap();
        let plan = build_plan(&train, PlanKind::Custom { ways, shots: 1, base, sessions: None }, seed).unwrap();
        prop_assert_eq!(plan.sessions(), 1 + extra / ways);
        let mut seen = Vec::new();
        for t in 1..=plan.sessions() {
            let cls = plan.classes(t).unwrap();
            prop_assert_eq!(cls.len(), if t == 1 { base } else { ways });
            prop_assert!(cls.iter().all(|c| !seen.contains(c)));
            seen.extend_from_slice(cls);
            let mut learned = plan.learned(t).unwrap();
            learned.sort_unstable();
            let mut expected = seen.clone();
            expected.sort_unstable();
            prop_assert_eq!(learned, expected);
        }
    }

    #[test]
    fn penalty_is_nonnegative_and_vanishes_at_anchor(
        theta in prop::collection::vec(-5.0f64..5.0, 6),
        anchor in prop::collection::vec(-5.0f64..5.0, 6),
        gamma in prop::collection::vec(-5.0f64..5.0, 6),
        alpha in 0.0f64..100.0,
    ) {
        let t = RealArray::matrix(2, 3, theta).unwrap();
        let a = RealArray::matrix(2, 3, anchor).unwrap();
        let g = RealArray::matrix(2, 3, gamma).unwrap();
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let p = consolidation_penalty(&mut tape, leaf, Some(&a), &g, alpha, true).unwrap();
        prop_assert!(tape.value(p).scalar_value().unwrap() >= 0.0);
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let p = consolidation_penalty(&mut tape, leaf, Some(&t), &g, alpha, true).unwrap();
        prop_assert_eq!(tape.value(p).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn sgd_step_is_affine(
        theta in prop::collection::vec(-5.0f64..5.0, 4),
        grad in prop::collection::vec(-5.0f64..5.0, 4),
        lr in 0.0f64..2.0,
    ) {
        let t = RealArray::vector(theta.clone()).unwrap();
        let g = RealArray::vector(grad.clone()).unwrap();
        let next = sgd_step(&t, &g, lr).unwrap();
        for i in 0..4 {
            prop_assert_eq!(next.data()[i], theta[i] - lr * grad[i]);
        }
    }

    #[test]
    fn config_parsing_is_total(text in "([a-z._ =#0-9\"]{0,30}\n){0,6}") {
        match Settings::parse(&text, Path::new(".")) {
            Ok(s) => { let _ = RunConfig::from_settings(&s); }
            Err(e) => prop_assert!(e.to_string().starts_with("line ")),
        }
    }
}
