use neobert::encoder::{EncoderModel, ModelConfig};
use neobert::heads::{
    align_answer, align_word_labels, evaluate, finetune, parse_record, pooled_embedding, predict, predict_span,
    FinetuneConfig, HeadKind, LabeledExample, Metrics, Prediction, TaskHead, Target,
};
use neobert::tensor::IGNORE_INDEX;
use neobert::tokenizer::{special, NormalizerConfig, Vocab};
use neobert::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> EncoderModel<f64> {
    EncoderModel::new(ModelConfig::new(1, 16, 2, 64, 32), seed).unwrap()
}

fn random_ids(r: &mut ChaCha8Rng) -> Vec<u32> {
    let mut ids = vec![special::CLS];
    ids.extend((0..r.random_range(3..12)).map(|_| r.random_range(5..64)));
    ids.push(special::SEP);
    ids
}

fn vocab() -> Vocab {
    let mut t: Vec<String> = special::TOKENS.iter().map(|s| s.to_string()).collect();
    t.extend(["the", "cat", "sat", "in", "new", "york", "##er", "who", "?", "."].map(String::from));
    Vocab::from_tokens(t, NormalizerConfig { lowercase: true, ..Default::default() }).unwrap()
}

/// Brute force over every valid pair; ties resolved by the smallest
/// `(start, end)` in lexicographic order.
fn brute_force(s: &[f64], e: &[f64], max_len: usize) -> (usize, usize) {
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..s.len() {
        for j in i..e.len().min(i + max_len + 1) {
            let score = s[i] + e[j];
            if best.is_none_or(|b| score > b.0) {
                best = Some((score, i, j));
            }
        }
    }
    best.map_or((0, 0), |b| (b.1, b.2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn predict_span_equals_brute_force(
        s in prop::collection::vec(-4i8..4, 1..70),
        e in prop::collection::vec(-4i8..4, 1..70),
        max_len in 0usize..40,
    ) {
        let n = s.len().min(e.len());
        let s: Vec<f64> = s[..n].iter().map(|&x| x as f64).collect();
        let e: Vec<f64> = e[..n].iter().map(|&x| x as f64).collect();
        prop_assert_eq!(predict_span(&s, &e, max_len), brute_force(&s, &e, max_len));
    }
}

#[test]
fn span_examples() {
    assert_eq!(predict_span(&[0.3], &[0.1], 30), (0, 0));
    assert_eq!(predict_span(&[1.0, 1.0], &[1.0, 1.0], 30), (0, 0));
    assert_eq!(predict_span(&[0.0, 5.0, 0.0], &[9.0, 0.0, 1.0], 30), (0, 0));
    assert_eq!(predict_span(&[0.0, 5.0, 0.0], &[0.0, 0.0, 1.0], 30), (1, 2));
    assert_eq!(predict_span(&[5.0, 0.0, 0.0], &[0.0, 0.0, 9.0], 1), (1, 2));
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let mut accs = Vec::new();
    for seed in 0..5u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut make = |n: usize| -> Vec<LabeledExample> {
            (0..n)
                .map(|_| LabeledExample {
                    ids: random_ids(&mut r),
                    target: Target::Class(r.random_range(0..2)),
                })
                .collect()
        };
        let train = make(64);
        let held_out = make(200);
        let mut m = model(seed);
        let mut head = TaskHead::new(HeadKind::SequenceClassification { num_labels: 2 }, 16, seed).unwrap();
        let cfg = FinetuneConfig {
            epochs: 2,
            seed,
            ..FinetuneConfig::default()
        };
        finetune(&mut m, &mut head, &train, &cfg).unwrap();
        match evaluate(&m, &head, &held_out).unwrap() {
            Metrics::Accuracy { accuracy } => accs.push(accuracy),
            other => panic!("{other:?}"),
        }
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "held-out accuracies {accs:?}");
}

#[test]
fn token_classification_learns_a_token_identity_rule() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<LabeledExample> = (0..32)
        .map(|_| {
            let ids = random_ids(&mut r);
            let labels = ids
                .iter()
                .map(|&id| if id < special::COUNT as u32 { IGNORE_INDEX } else { (id >= 40) as i64 })
                .collect();
            LabeledExample {
                ids,
                target: Target::Tokens(labels),
            }
        })
        .collect();
    let mut m = model(3);
    let mut head = TaskHead::new(HeadKind::TokenClassification { num_labels: 2 }, 16, 3).unwrap();
    let cfg = FinetuneConfig {
        epochs: 8,
        lr: 3e-3,
        ..FinetuneConfig::default()
    };
    let reports = finetune(&mut m, &mut head, &data, &cfg).unwrap();
    assert!(reports.last().unwrap().mean_loss < reports[0].mean_loss);
    match evaluate(&m, &head, &data).unwrap() {
        Metrics::TokenF1 { f1, .. } => assert!(f1 > 0.9, "f1 {f1}"),
        other => panic!("{other:?}"),
    }
    let preds = predict(&m, &head, &data[..1]).unwrap();
    assert!(matches!(&preds[0], Prediction::Tokens(t) if t.len() == data[0].ids.len()));
}

#[test]
fn heads_reject_mismatched_targets() {
    let data = vec![LabeledExample {
        ids: vec![special::CLS, 7, special::SEP],
        target: Target::Span { start: 1, end: 1 },
    }];
    let mut m = model(0);
    let mut head = TaskHead::new(HeadKind::SequenceClassification { num_labels: 3 }, 16, 0).unwrap();
    let err = finetune(&mut m, &mut head, &data, &FinetuneConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let out_of_range = vec![LabeledExample {
        ids: vec![special::CLS, 7, special::SEP],
        target: Target::Class(3),
    }];
    assert!(finetune(&mut m, &mut head, &out_of_range, &FinetuneConfig::default()).is_err());
    assert!(TaskHead::<f64>::new(HeadKind::SequenceClassification { num_labels: 1 }, 16, 0).is_err());
}

#[test]
fn pooled_embeddings_ignore_padding_and_are_unit_length() {
    let m = model(5);
    let a = pooled_embedding(&m, &[special::CLS, 9, 10, special::SEP]).unwrap();
    let b = pooled_embedding(&m, &[special::CLS, 9, 10, special::SEP, special::PAD, special::PAD]).unwrap();
    assert_eq!(a, b);
    assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(matches!(pooled_embedding(&m, &[special::PAD; 3]), Err(Error::Contract(_))));
}

#[test]
fn records_are_aligned_to_tokens() {
    let v = vocab();
    let ex = align_word_labels(&v, "The newer cat", &[0, 1, 2]).unwrap();
    assert_eq!(ex.target, Target::Tokens(vec![IGNORE_INDEX, 0, 1, IGNORE_INDEX, 2, IGNORE_INDEX]));
    assert!(align_word_labels(&v, "the cat", &[0]).is_err());

    let ex = align_answer(&v, Some("who sat ?"), "the cat sat in new york .", 15, "new york").unwrap();
    let Target::Span { start, end } = ex.target else { panic!() };
    let names: Vec<&str> = ex.ids[start..=end].iter().map(|&i| v.token(i).unwrap()).collect();
    assert_eq!(names, ["new", "york"]);
    assert!(align_answer(&v, None, "the cat", 0, "dog").is_err());

    let cls = parse_record(&v, r#"{"text": "the cat", "label": 1}"#).unwrap();
    assert_eq!(cls.target, Target::Class(1));
    let qa = parse_record(&v, r#"{"text": "the cat sat", "question": "who ?", "answer_start_char": 4, "answer_text": "cat"}"#)
        .unwrap();
    assert!(matches!(qa.target, Target::Span { start: 5, end: 5 }));
    assert!(parse_record(&v, r#"{"text": "x", "label": 1, "labels": [1]}"#).is_err());
    assert!(parse_record(&v, r#"{"text": "x", "colour": 1}"#).is_err());
}
