//! Peak heap use while streaming a 1 GiB corpus through ingest, packing,
//! batching and masking.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use neobert::data::{batches, ingest, mask_for_mlm, pack, MaskingConfig};
use neobert::tokenizer::{train_wordpiece, NormalizerConfig};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = LIVE.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                LIVE.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

const GIB: u64 = 1 << 30;
const MIB: usize = 1 << 20;

const PARAGRAPHS: [&str; 4] = [
    "the quick brown fox jumps over the lazy dog while the cat sleeps on the warm mat",
    "a journey of a thousand miles begins with a single step taken in the morning light",
    "data packing keeps every row of the batch full so that little compute is wasted",
    "masked language models learn to predict hidden words from the context around them",
];

#[test]
fn one_gib_corpus_streams_in_bounded_memory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.txt");
    {
        let mut w = BufWriter::with_capacity(1 << 20, File::create(&path).unwrap());
        let mut written = 0u64;
        let mut k = 0usize;
        while written < GIB {
            let para = PARAGRAPHS[k % PARAGRAPHS.len()];
            let reps = 1 + k % 7;
            for _ in 0..reps {
                w.write_all(para.as_bytes()).unwrap();
                w.write_all(b"\n").unwrap();
                written += para.len() as u64 + 1;
            }
            w.write_all(b"\n").unwrap();
            written += 1;
            k += 1;
        }
        w.flush().unwrap();
    }
    let vocab = train_wordpiece(PARAGRAPHS, 200, NormalizerConfig::default()).unwrap();
    let cfg = MaskingConfig {
        seed: 3,
        ..MaskingConfig::default()
    };

    let baseline = LIVE.load(Ordering::Relaxed);
    PEAK.store(baseline, Ordering::Relaxed);
    let docs = ingest(&[&path], &vocab);
    let rows = pack(docs, 512).unwrap();
    let mut tokens = 0usize;
    let mut masked = 0usize;
    for batch in batches(rows, 16, 512) {
        let mut batch = batch.unwrap();
        mask_for_mlm(&mut batch, &cfg).unwrap();
        tokens += batch.non_pad_tokens();
        masked += batch.masked_tokens();
    }
    let peak = PEAK.load(Ordering::Relaxed) - baseline;
    println!("streamed {tokens} tokens ({masked} masked), peak pipeline heap {:.2} MiB", peak as f64 / MIB as f64);
    assert!(tokens > 100_000_000);
    assert!(peak < 64 * MIB, "peak {peak} bytes");
}
