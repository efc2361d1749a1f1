use ctes_retrieval::data::{split_queries, Corpus, Label, DEFAULT_SPLIT};
use ctes_retrieval::datagen::{generate, GenConfig};
use ctes_retrieval::mtpp::{ModelConfig, Variant};
use ctes_retrieval::trainer::{
    batch_objective, hinge_term, sample_task, train, Ablation, Checkpoint, QueryTask, TrainConfig, TrainData,
};
use ctes_retrieval::unwarp::{Unwarp, UnwarpConfig};
use ctes_retrieval::{EventSequence, RelevanceJudgments};

struct Micro {
    queries: Vec<EventSequence>,
    corpus: Corpus,
}

fn micro() -> Micro {
    let queries = vec![
        EventSequence::from_parts("q0", &[0.11, 0.37, 0.52], &[0, 2, 1], 0.8),
        EventSequence::from_parts("q1", &[0.05, 0.21, 0.64, 0.71], &[1, 1, 0, 2], 0.9),
    ];
    let mut corpus = Corpus::new(3);
    for (id, t, m) in [
        ("c0", vec![0.13, 0.33, 0.58], vec![0, 2, 2]),
        ("c1", vec![0.09, 0.26, 0.61, 0.77], vec![1, 0, 0, 2]),
        ("c2", vec![0.2, 0.45], vec![2, 1]),
    ] {
        corpus.insert(EventSequence::from_parts(id, &t, &m, 0.85)).unwrap();
    }
    Micro { queries, corpus }
}

fn tasks(m: &Micro) -> Vec<QueryTask<'_>> {
    let c = |id: &str| m.corpus.get(id).unwrap();
    vec![
        QueryTask {
            query: &m.queries[0],
            candidates: vec![c("c0"), c("c1"), c("c2")],
            pairs: vec![(0, 1), (0, 2)],
            eta: 0.004,
        },
        QueryTask {
            query: &m.queries[1],
            candidates: vec![c("c1"), c("c0"), c("c2")],
            pairs: vec![(0, 1), (0, 2)],
            eta: -0.007,
        },
    ]
}

fn micro_checkpoint(variant: Variant, seed: u64) -> Checkpoint {
    let mut mc = ModelConfig::new(variant, 4, 3);
    mc.max_len = 6;
    let mut ck = Checkpoint::init(mc, UnwarpConfig { hidden: (4, 4), ..Default::default() }, Ablation::Full, seed);
    // Larger weights make the warp visibly non-linear.
    for v in ck.unwarp.phi_mut().iter_mut() {
        *v *= 20.0;
    }
    *ck.unwarp.phi_mut().last_mut().unwrap() = 1.0;
    ck
}

fn objective_gradient_matches_differences(variant: Variant) {
    let m = micro();
    let ts = tasks(&m);
    let cfg = TrainConfig {
        margin: 2.0,
        gamma: 0.3,
        ..Default::default()
    };
    let ck = micro_checkpoint(variant, 3);
    let obj = batch_objective(&ck, &ts, &cfg, 1.0, true).unwrap();
    assert!(obj.active_pairs > 0);
    let n_theta = ck.model.num_params();
    let mut fd = Vec::with_capacity(obj.grad.len());
    let mut err: f64 = 0.0;
    for (i, g) in obj.grad.iter().enumerate() {
        let value = |delta: f64| {
            let mut c = ck.clone();
            if i < n_theta {
                c.model.theta_mut()[i] += delta;
            } else {
                c.unwarp.phi_mut()[i - n_theta] += delta;
            }
            batch_objective(&c, &ts, &cfg, 1.0, false).unwrap().total
        };
        // A step can straddle a ReLU kink; such estimates disagree across
        // step sizes, so the closest of three is kept.
        let (best, e) = [1e-6, 1e-7, 1e-8]
            .iter()
            .map(|&h| (value(h) - value(-h)) / (2.0 * h))
            .map(|d| (d, (d - g).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        fd.push(best);
        err = err.max(e);
    }
    let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(err / scale < 1e-4, "{variant:?}: max error {err:e} against scale {scale:e}");
    let phi_scale = fd[n_theta..].iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(phi_scale > 1e-6, "unwarp gradient should not vanish");
}

#[test]
fn self_objective_gradient_matches_differences() {
    objective_gradient_matches_differences(Variant::SelfAttention);
}

#[test]
fn cross_objective_gradient_matches_differences() {
    objective_gradient_matches_differences(Variant::CrossAttention);
}

#[test]
fn objective_is_additive_over_queries() {
    let m = micro();
    let ts = tasks(&m);
    let cfg = TrainConfig {
        margin: 2.0,
        ..Default::default()
    };
    let ck = micro_checkpoint(Variant::SelfAttention, 5);
    let both = batch_objective(&ck, &ts, &cfg, 1.0, false).unwrap();
    let a = batch_objective(&ck, &ts[..1], &cfg, 1.0, false).unwrap();
    let b = batch_objective(&ck, &ts[1..], &cfg, 1.0, false).unwrap();
    assert!((2.0 * both.hinge - (a.hinge + b.hinge)).abs() < 1e-12);
    assert_eq!(both.penalty, a.penalty);
    assert_eq!(both.l2, a.l2);
}

#[test]
fn single_triple_is_hinge_plus_regularizers() {
    let m = micro();
    let mut ck = micro_checkpoint(Variant::SelfAttention, 7);
    ck.gamma = 0.1;
    let q = &m.queries[0];
    let task = QueryTask {
        query: q,
        candidates: vec![m.corpus.get("c0").unwrap(), m.corpus.get("c2").unwrap()],
        pairs: vec![(0, 1)],
        eta: 0.0,
    };
    let cfg = TrainConfig::default();
    let obj = batch_objective(&ck, &[task], &cfg, 1.0, false).unwrap();
    let scorer = ck.scorer();
    let sp = scorer.relevance_score(q, m.corpus.get("c0").unwrap()).unwrap().total;
    let sn = scorer.relevance_score(q, m.corpus.get("c2").unwrap()).unwrap().total;
    let expected = hinge_term(sp, sn, cfg.margin) + obj.penalty + obj.l2;
    assert!((obj.total - expected).abs() < 1e-12, "{} vs {}", obj.total, expected);
}

#[test]
fn satisfied_margins_leave_only_regularizers() {
    let m = micro();
    let mut ck = micro_checkpoint(Variant::SelfAttention, 9);
    ck.unwarp = Unwarp::identity(*ck.unwarp.config());
    let q = &m.queries[0];
    let copy = EventSequence::from_parts("copy", &q.times(), &q.marks(), q.horizon);
    let task = QueryTask {
        query: q,
        candidates: vec![&copy, m.corpus.get("c2").unwrap()],
        pairs: vec![(0, 1)],
        eta: 0.0,
    };
    let cfg = TrainConfig {
        margin: 0.0,
        ..Default::default()
    };
    let obj = batch_objective(&ck, &[task], &cfg, 1.0, true).unwrap();
    assert_eq!(obj.hinge, 0.0);
    assert_eq!(obj.active_pairs, 0);
    assert_eq!(obj.total, obj.penalty + obj.l2);
}

#[test]
fn sampled_negatives_are_never_positives() {
    let bench = generate(&GenConfig {
        bases: 6,
        ..Default::default()
    })
    .unwrap();
    let mut r = ctes_retrieval::seed::rng(11);
    for q in bench.queries.iter() {
        let positives = bench.judgments.positives(&q.id);
        for _ in 0..5 {
            let t = sample_task(q, &bench.corpus, &bench.judgments, 100, 1000, &mut r).unwrap();
            for &(p, n) in &t.pairs {
                assert!(positives.contains(&t.candidates[p].id.as_str()));
                assert!(!positives.contains(&t.candidates[n].id.as_str()));
            }
            let negs = t.candidates.iter().filter(|c| !positives.contains(&c.id.as_str())).count();
            assert_eq!(negs, 100);
        }
    }
}

#[test]
fn query_without_positives_is_skipped() {
    let m = micro();
    let mut j = RelevanceJudgments::new();
    for c in ["c0", "c1", "c2"] {
        j.insert("q0", c, if c == "c0" { Label::Relevant } else { Label::NonRelevant }).unwrap();
        j.insert("q1", c, Label::NonRelevant).unwrap();
    }
    let qs: Vec<&EventSequence> = m.queries.iter().collect();
    let data = TrainData {
        train: &qs,
        valid: &[],
        corpus: &m.corpus,
        judgments: &j,
    };
    let cfg = TrainConfig {
        epochs: 1,
        negatives: 2,
        ..Default::default()
    };
    let out = train(micro_checkpoint(Variant::SelfAttention, 1), &data, &cfg).unwrap();
    assert_eq!(out.report.skipped_queries, vec!["q1".to_string()]);
    assert_eq!(out.report.steps, 1);
}

fn desk_run(epochs: usize) -> ctes_retrieval::trainer::TrainReport {
    let bench = generate(&GenConfig {
        bases: 24,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let split = split_queries(&bench.queries.ids(), DEFAULT_SPLIT, 4).unwrap();
    let pick = |ids: &[String]| ids.iter().map(|i| bench.queries.get(i).unwrap()).collect::<Vec<_>>();
    let (train_q, valid_q) = (pick(&split.train), pick(&split.valid));
    let data = TrainData {
        train: &train_q,
        valid: &valid_q,
        corpus: &bench.corpus,
        judgments: &bench.judgments,
    };
    let mut mc = ModelConfig::new(Variant::SelfAttention, 8, 5);
    mc.max_len = 48;
    let init = Checkpoint::init(mc, UnwarpConfig { hidden: (16, 16), ..Default::default() }, Ablation::Full, 4);
    let cfg = TrainConfig {
        epochs,
        seed: 4,
        ..Default::default()
    };
    train(init, &data, &cfg).unwrap().report
}

#[test]
fn training_lowers_the_loss() {
    let report = desk_run(10);
    let first = report.curve[0].loss;
    let last = report.curve[10].loss;
    assert!(last < first, "epoch 10 loss {last} vs epoch 0 loss {first}");
    assert!(report.curve.iter().all(|r| r.val_map.is_some()));
}

#[test]
fn training_is_deterministic() {
    assert_eq!(desk_run(2).curve, desk_run(2).curve);
}
