use std::collections::HashMap;
use std::fs;

use neobert::data::{
    batches, cached_documents, ingest, mask_for_mlm, open_cache, pack, pack_stats, write_cache, Document,
    MaskingConfig, PackedBatch, PackedRow,
};
use neobert::tensor::IGNORE_INDEX;
use neobert::tokenizer::{special, NormalizerConfig, Vocab};
use neobert::{Error, Result};
use proptest::prelude::*;

fn docs_from(lengths: &[usize], seed: u32) -> Vec<Result<Document>> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| Ok(Document::new("p", i as u64, (0..n as u32).map(|k| 5 + (k * 7 + seed + i as u32) % 300).collect())))
        .collect()
}

fn rows_of(lengths: &[usize], window: usize) -> Vec<PackedRow> {
    pack(docs_from(lengths, 0), window).unwrap().collect::<Result<_>>().unwrap()
}

fn histogram(ids: impl IntoIterator<Item = u32>) -> HashMap<u32, usize> {
    let mut h = HashMap::new();
    for id in ids {
        *h.entry(id).or_default() += 1;
    }
    h
}

fn small_vocab() -> Vocab {
    let mut tokens: Vec<String> = special::TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(["hello", "world", "foo", "bar", "##s"].map(String::from));
    Vocab::from_tokens(tokens, NormalizerConfig::default()).unwrap()
}

proptest! {
    #[test]
    fn packing_loses_and_duplicates_nothing(lengths in prop::collection::vec(1usize..200, 1..30), window in 8usize..128) {
        let rows = rows_of(&lengths, window);
        let packed = histogram(rows.iter().flat_map(|r| r.ids.iter().copied()).filter(|&id| id >= special::COUNT as u32));
        let source = histogram(docs_from(&lengths, 0).into_iter().flat_map(|d| d.unwrap().ids));
        prop_assert_eq!(packed, source);
        for r in &rows {
            prop_assert_eq!(r.ids.len(), window);
        }
    }

    #[test]
    fn packing_never_pads_more_than_one_document_per_row(lengths in prop::collection::vec(1usize..300, 1..40), window in 8usize..256) {
        let stats = pack_stats(docs_from(&lengths, 0), window).unwrap();
        prop_assert!(stats.pad_fraction <= stats.baseline_pad_fraction + 1e-12);
        prop_assert!(stats.rows <= stats.baseline_rows);
    }

    #[test]
    fn masking_keeps_the_batch_invariants(lengths in prop::collection::vec(1usize..60, 1..20), rate in 0.01f64..=1.0, seed in any::<u64>()) {
        let rows = rows_of(&lengths, 64);
        let mut batch = PackedBatch::from_rows(rows, 64).unwrap();
        let original = batch.input_ids.clone();
        mask_for_mlm(&mut batch, &MaskingConfig { mask_rate: rate, mask_replace_prob: 1.0, seed }).unwrap();
        batch.validate().unwrap();
        for i in 0..original.len() {
            if batch.labels[i] != IGNORE_INDEX {
                prop_assert_eq!(batch.input_ids[i], special::MASK);
                prop_assert_eq!(batch.labels[i], original[i] as i64);
                prop_assert!(original[i] >= special::COUNT as u32);
            } else {
                prop_assert_eq!(batch.input_ids[i], original[i]);
            }
        }
        for r in 0..batch.rows() {
            let row = &batch.labels[r * 64..(r + 1) * 64];
            prop_assert!(row.iter().any(|&l| l != IGNORE_INDEX));
        }
    }

    #[test]
    fn same_seed_gives_identical_batches(lengths in prop::collection::vec(1usize..80, 1..20), seed in any::<u64>()) {
        let run = || {
            let rows = pack(docs_from(&lengths, 3), 32).unwrap();
            batches(rows, 4, 32)
                .map(|b| {
                    let mut b = b.unwrap();
                    mask_for_mlm(&mut b, &MaskingConfig { seed, ..MaskingConfig::default() }).unwrap();
                    b
                })
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn packing_examples() {
    let rows = rows_of(&[598, 398, 898], 1024);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].spans, vec![(0, 600), (600, 1000)]);
    assert_eq!(rows[1].spans, vec![(0, 900)]);
    assert_eq!(&rows[0].positions[598..602], &[598, 599, 0, 1]);
    assert_eq!(rows[0].positions[1000], 0);
    assert_eq!(rows[0].ids[1000], special::PAD);

    let exact = rows_of(&[1022], 1024);
    assert_eq!(exact.len(), 1);
    assert_eq!(exact[0].non_pad(), 1024);

    let chunked = rows_of(&[3 * 1022], 1024);
    assert_eq!(chunked.len(), 3);
    for r in &chunked {
        assert_eq!(r.spans, vec![(0, 1024)]);
        assert_eq!((r.ids[0], r.ids[1023]), (special::CLS, special::SEP));
    }

    let stats = pack_stats(docs_from(&[598, 398, 898], 1024), 1024).unwrap();
    assert!((stats.pad_fraction - 0.0723).abs() < 5e-5, "{}", stats.pad_fraction);
    assert!(matches!(pack(docs_from(&[3], 7), 7), Err(Error::Config(_))));
}

#[test]
fn masking_edge_cases() {
    let rows = rows_of(&[10, 20, 5], 64);
    let mut batch = PackedBatch::from_rows(rows.clone(), 64).unwrap();
    mask_for_mlm(&mut batch, &MaskingConfig { mask_rate: 1.0, ..MaskingConfig::default() }).unwrap();
    assert_eq!(batch.masked_tokens(), 35);

    let mut batch = PackedBatch::from_rows(rows.clone(), 64).unwrap();
    mask_for_mlm(&mut batch, &MaskingConfig { mask_rate: 1e-9, ..MaskingConfig::default() }).unwrap();
    assert_eq!(batch.masked_tokens(), batch.rows());

    let mut twice = PackedBatch::from_rows(rows, 64).unwrap();
    mask_for_mlm(&mut twice, &MaskingConfig::default()).unwrap();
    assert!(matches!(mask_for_mlm(&mut twice, &MaskingConfig::default()), Err(Error::Contract(_))));
}

#[test]
fn ingest_splits_on_blank_lines_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = small_vocab();
    let two = dir.path().join("two.txt");
    fs::write(&two, "hello world\nfoo\n\n\n  \nbar foos\n").unwrap();
    let docs: Vec<Document> = ingest(&[&two], &vocab).collect::<Result<_>>().unwrap();
    assert_eq!(docs.len(), 2);
    assert_eq!(docs[1].ids, vocab.tokenize("bar foos"));
    assert_eq!((docs[1].id.ordinal, docs[1].id.source.ends_with("two.txt")), (1, true));

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert_eq!(ingest(&[&empty], &vocab).count(), 0);

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, b"hello\nwor\xffld\n").unwrap();
    let err = ingest(&[&bad], &vocab).find_map(Result::err).unwrap();
    assert!(matches!(err, Error::Decode { offset: 9, .. }), "{err}");

    let missing = dir.path().join("missing.txt");
    let err = ingest(&[&missing], &vocab).find_map(Result::err).unwrap();
    assert!(matches!(err, Error::Io { ref path, .. } if path == &missing));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn cache_is_invalidated_when_the_vocab_changes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "hello world\n\nfoo bar\n").unwrap();
    let cache = dir.path().join("c.tok");
    let vocab = small_vocab();
    let first: Vec<Document> = cached_documents(&cache, &[&corpus], &vocab).unwrap().collect::<Result<_>>().unwrap();
    let direct: Vec<Document> = ingest(&[&corpus], &vocab).collect::<Result<_>>().unwrap();
    assert_eq!(first, direct);
    assert!(open_cache(&cache, &vocab).unwrap().is_some());

    let mut tokens = vocab.tokens().to_vec();
    tokens.push("zzz".into());
    let other = Vocab::from_tokens(tokens, NormalizerConfig::default()).unwrap();
    assert!(open_cache(&cache, &other).unwrap().is_none());
    let rebuilt: Vec<Document> = cached_documents(&cache, &[&corpus], &other).unwrap().collect::<Result<_>>().unwrap();
    assert_eq!(rebuilt, direct);
    assert!(open_cache(&cache, &other).unwrap().is_some());

    let bytes = fs::read(&cache).unwrap();
    fs::write(&cache, &bytes[..bytes.len() - 3]).unwrap();
    let truncated: Result<Vec<Document>> = open_cache(&cache, &other).unwrap().unwrap().collect();
    assert!(matches!(truncated, Err(Error::Format { .. })));

    write_cache(&cache, &other, direct.iter().cloned().map(Ok)).unwrap();
    let mut bumped = fs::read(&cache).unwrap();
    bumped[8] = 9;
    fs::write(&cache, bumped).unwrap();
    assert!(matches!(open_cache(&cache, &other), Err(Error::UpgradeNeeded { found: 9, .. })));
}
