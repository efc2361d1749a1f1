//! Builds a seeded synthetic benchmark and writes it to disk.
//!
//! ```bash
//! cargo run --release --example generate_benchmark -- /tmp/bench
//! ```

use ctes_retrieval::data::{save_corpus, save_judgments, split_queries, DEFAULT_SPLIT};
use ctes_retrieval::datagen::{generate, GenConfig, WarpFamily};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "bench".into());
    let config = GenConfig {
        bases: 40,
        warp: WarpFamily::Affine { lo: 0.5, hi: 2.0 },
        seed: 7,
        ..GenConfig::default()
    };
    let bench = generate(&config)?;
    let split = split_queries(&bench.queries.ids(), DEFAULT_SPLIT, 7)?;

    println!("queries:   {}", bench.queries.len());
    println!("corpus:    {}", bench.corpus.len());
    println!("judgments: {}", bench.judgments.len());
    println!("relevant fraction per query: {:.4}", bench.relevance_ratio());
    println!("longest sequence: {}", bench.corpus.max_len());
    println!("split: {} train / {} valid / {} test", split.train.len(), split.valid.len(), split.test.len());
    if let Some((q, a)) = bench.warp_factors.first() {
        println!("warp factor applied to {q}: {a:.3}");
    }

    std::fs::create_dir_all(&out)?;
    save_corpus(format!("{out}/queries.jsonl"), &bench.queries)?;
    save_corpus(format!("{out}/corpus.jsonl"), &bench.corpus)?;
    save_judgments(format!("{out}/judgments.tsv"), &bench.judgments)?;
    println!("wrote {out}/");
    Ok(())
}
