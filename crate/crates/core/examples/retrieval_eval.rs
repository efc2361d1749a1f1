//! Ranks a benchmark exhaustively and through the hashed index, then reports
//! MAP, NDCG and the fraction of comparisons saved.
//!
//! ```bash
//! cargo run --release --example retrieval_eval
//! ```

use ctes_retrieval::datagen::{generate, GenConfig};
use ctes_retrieval::hashing::HashConfig;
use ctes_retrieval::relevance::RelevanceModel;
use ctes_retrieval::retrieval::{evaluate, EvalConfig, HashKind, IndexConfig, Pipeline};
use ctes_retrieval::seed::rng;
use ctes_retrieval::unwarp::{Unwarp, UnwarpConfig};
use ctes_retrieval::{EventSequence, ModelConfig, MtppModel, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = generate(&GenConfig {
        bases: 20,
        seed: 9,
        ..GenConfig::default()
    })?;
    let model = MtppModel::new(ModelConfig::new(Variant::SelfAttention, 8, 5), &mut rng(9));
    let scorer = RelevanceModel::new(model, Unwarp::identity(UnwarpConfig::default()));
    let queries: Vec<&EventSequence> = bench.queries.iter().collect();
    let eval = EvalConfig::default();

    let exhaustive = evaluate(&queries, &bench.corpus, &bench.judgments, &scorer, None, &eval)?;
    println!("{:<12} {:>6} {:>8} {:>8} {:>9}", "mode", "MAP", "NDCG@10", "MRR", "reduction");
    println!(
        "{:<12} {:>6.4} {:>8.4} {:>8.4} {:>9.3}",
        "exhaustive", exhaustive.map, exhaustive.ndcg10, exhaustive.mrr, exhaustive.reduction
    );

    let kinds = [
        ("trained", HashKind::Trained(HashConfig { seed: 9, ..HashConfig::new(8) })),
        ("random", HashKind::Random { bits: 8, seed: 9 }),
    ];
    for (name, kind) in kinds {
        let index = IndexConfig {
            tables: 10,
            bits_per_table: 4,
            seed: 9,
        };
        let pipeline = Pipeline::build(&bench.corpus, scorer.clone(), &kind, &index)?;
        let r = evaluate(&queries, &bench.corpus, &bench.judgments, &scorer, Some(&pipeline), &eval)?;
        println!("{:<12} {:>6.4} {:>8.4} {:>8.4} {:>9.3}", name, r.map, r.ndcg10, r.mrr, r.reduction);
    }

    let index = IndexConfig {
        tables: 10,
        bits_per_table: 6,
        seed: 9,
    };
    let pipeline = Pipeline::build(&bench.corpus, scorer, &HashKind::Random { bits: 8, seed: 9 }, &index)?;
    let top = pipeline.query_topk(queries[0], 5, &bench.corpus, None)?;
    println!("top 5 for {} ({} examined, {}):", top.query_id, top.examined, top.mode.name());
    for (id, score) in &top.results {
        println!("  {id:<12} {score:.4}");
    }
    Ok(())
}
