use std::time::Instant;

use neobert::tokenizer::{special, train_wordpiece, NormalizerConfig, Vocab};
use neobert::Error;
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab_of(extra: &[&str]) -> Vocab {
    let mut tokens: Vec<String> = special::TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(extra.iter().map(|s| s.to_string()));
    Vocab::from_tokens(tokens, NormalizerConfig::default()).unwrap()
}

fn random_vocab(r: &mut ChaCha8Rng, alphabet: &[char]) -> Vocab {
    let mut tokens: Vec<String> = special::TOKENS.iter().map(|s| s.to_string()).collect();
    for &c in &alphabet[..alphabet.len() - 2] {
        tokens.push(c.to_string());
        tokens.push(format!("##{c}"));
    }
    while tokens.len() < 200 {
        let len = r.random_range(2..=6);
        let piece: String = (0..len).map(|_| *alphabet.choose(r).unwrap()).collect();
        let tok = if r.random_bool(0.5) { format!("##{piece}") } else { piece };
        if !tokens.contains(&tok) {
            tokens.push(tok);
        }
    }
    // Drop a few single characters so some words fail to match.
    tokens.retain(|t| t != "##c" && t != "d");
    Vocab::from_tokens(tokens, NormalizerConfig::default()).unwrap()
}

#[test]
fn fast_matcher_equals_greedy_reference_on_random_vocab() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let alphabet: Vec<char> = "abcdeéz.,".chars().collect();
    let vocab = random_vocab(&mut r, &alphabet[..7]);
    let mut unk = 0;
    for _ in 0..10_000 {
        let len = r.random_range(0..40);
        let s: String = (0..len)
            .map(|_| if r.random_bool(0.15) { ' ' } else { *alphabet.choose(&mut r).unwrap() })
            .collect();
        let fast = vocab.tokenize(&s);
        assert_eq!(fast, vocab.tokenize_reference(&s), "{s:?}");
        unk += fast.iter().filter(|&&t| t == special::UNK).count();
    }
    assert!(unk > 0);
}

#[test]
fn wordpiece_examples() {
    let v = vocab_of(&["un", "##aff", "##able", "a"]);
    assert_eq!(v.tokenize(""), Vec::<u32>::new());
    let ids = v.tokenize("unaffable");
    let names: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
    assert_eq!(names, ["un", "##aff", "##able"]);
    assert_eq!(v.detokenize(&ids).unwrap(), "unaffable");
    assert_eq!(v.detokenize(&[]).unwrap(), "");
    assert_eq!(v.tokenize("ש"), vec![special::UNK]);
    assert_eq!(v.tokenize("unaffablex a"), vec![special::UNK, v.id("a").unwrap()]);
    assert!(matches!(v.detokenize(&[99]), Err(Error::Input(_))));
}

#[test]
fn training_examples() {
    let norm = NormalizerConfig::default();
    let v = train_wordpiece(["a a a"], 6, norm).unwrap();
    assert_eq!(v.tokens()[special::COUNT..], ["a"]);

    let corpus = vec!["ab"; 100];
    let v = train_wordpiece(&corpus, 8, norm).unwrap();
    assert!(v.id("ab").is_some(), "{:?}", v.tokens());
    assert!(v.len() <= 8);

    assert!(matches!(train_wordpiece(Vec::<String>::new(), 100, norm), Err(Error::Input(_))));
    assert!(matches!(train_wordpiece(["abcdef"], 7, norm), Err(Error::Config(_))));
}

#[test]
fn training_is_byte_for_byte_deterministic() {
    let mut r = ChaCha8Rng::seed_from_u64(22);
    let words = ["shalom", "olam", "sefer", "bayit", "yeled", "yalda", "kelev", "hatul"];
    let corpus: Vec<String> = (0..300)
        .map(|_| (0..12).map(|_| *words.choose(&mut r).unwrap()).collect::<Vec<_>>().join(" "))
        .collect();
    let norm = NormalizerConfig::default();
    let a = train_wordpiece(&corpus, 80, norm).unwrap();
    let b = train_wordpiece(&corpus, 80, norm).unwrap();
    assert_eq!(a.to_file_text().as_bytes(), b.to_file_text().as_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    a.save(&path).unwrap();
    assert_eq!(Vocab::load(&path, norm).unwrap(), a);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), a.to_file_text());
}

fn time_per_char(vocab: &Vocab, text: &str) -> f64 {
    let reps = (1_000_000 / text.len()).max(1);
    let started = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(vocab.tokenize(std::hint::black_box(text)));
    }
    started.elapsed().as_secs_f64() / (reps * text.len()) as f64
}

#[test]
fn tokenization_time_is_linear_in_input_length() {
    let mut heads: Vec<String> = (1..=40).map(|k| "a".repeat(k)).collect();
    heads.extend((1..=40).map(|k| format!("##{}", "a".repeat(k))));
    let refs: Vec<&str> = heads.iter().map(String::as_str).collect();
    let vocab = vocab_of(&refs);
    for suffix in ["", "b"] {
        let per_char: Vec<f64> = [1_000, 10_000, 100_000, 1_000_000]
            .iter()
            .map(|&n| time_per_char(&vocab, &format!("{}{suffix}", "a".repeat(n))))
            .collect();
        let fastest = per_char.iter().cloned().fold(f64::INFINITY, f64::min);
        let slowest = per_char.iter().cloned().fold(0.0, f64::max);
        assert!(slowest < 8.0 * fastest, "suffix {suffix:?}: per-char times {per_char:?}");
    }
}

proptest! {
    #[test]
    fn detokenize_inverts_tokenize_without_unknowns(words in prop::collection::vec("[a-e]{1,8}", 0..12), gaps in prop::collection::vec("[ \t\n]{1,3}", 12)) {
        let v = vocab_of(&["a", "b", "c", "d", "e", "##a", "##b", "##c", "##d", "##e", "ab", "##cd", "bad", "##ea"]);
        let mut text = String::new();
        for (w, g) in words.iter().zip(&gaps) {
            text.push_str(g);
            text.push_str(w);
        }
        let ids = v.tokenize(&text);
        prop_assert!(!ids.contains(&special::UNK));
        prop_assert_eq!(v.detokenize(&ids).unwrap(), v.normalize(&text));
    }

    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}", lower in any::<bool>()) {
        let norm = NormalizerConfig { lowercase: lower, ..NormalizerConfig::default() };
        let once = norm.normalize(&s);
        prop_assert_eq!(norm.normalize(&once), once);
    }
}
