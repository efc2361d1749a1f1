//! Trains the scorer with the pairwise hinge objective on a small benchmark
//! and compares test MAP before and after.
//!
//! ```bash
//! cargo run --release --example train_ranker
//! ```

use ctes_retrieval::data::{split_queries, DEFAULT_SPLIT};
use ctes_retrieval::datagen::{generate, GenConfig};
use ctes_retrieval::retrieval::{evaluate, EvalConfig};
use ctes_retrieval::trainer::{train, Ablation, Checkpoint, TrainConfig, TrainData};
use ctes_retrieval::unwarp::UnwarpConfig;
use ctes_retrieval::{ModelConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let bench = generate(&GenConfig {
        bases: 30,
        seed: 2,
        ..GenConfig::default()
    })?;
    let split = split_queries(&bench.queries.ids(), DEFAULT_SPLIT, 2)?;
    let pick = |ids: &[String]| ids.iter().filter_map(|i| bench.queries.get(i)).collect::<Vec<_>>();
    let (train_q, valid_q, test_q) = (pick(&split.train), pick(&split.valid), pick(&split.test));

    let mut mc = ModelConfig::new(Variant::SelfAttention, 8, 5);
    mc.max_len = 64;
    let unwarp = UnwarpConfig {
        hidden: (16, 16),
        ..UnwarpConfig::default()
    };
    let init = Checkpoint::init(mc, unwarp, Ablation::Full, 2);
    let config = TrainConfig {
        epochs: 8,
        seed: 2,
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: &train_q,
        valid: &valid_q,
        corpus: &bench.corpus,
        judgments: &bench.judgments,
    };
    let before = evaluate(&test_q, &bench.corpus, &bench.judgments, &init.scorer(), None, &EvalConfig::default())?;
    let out = train(init, &data, &config)?;
    print!("{}", out.report.curve_text());
    let after = evaluate(&test_q, &bench.corpus, &bench.judgments, &out.best.scorer(), None, &EvalConfig::default())?;
    println!("best epoch {}; test MAP {:.4} -> {:.4}", out.report.best_epoch, before.map, after.map);
    Ok(())
}
