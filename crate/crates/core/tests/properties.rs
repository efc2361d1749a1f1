use std::collections::HashSet;

use proptest::prelude::*;

use ctes_retrieval::autodiff::{Tape, Tensor};
use ctes_retrieval::hashing::{HashCode, HashIndex, RandomHyperplanes};
use ctes_retrieval::mtpp::{ModelConfig, MtppModel, Variant};
use ctes_retrieval::relevance::{mark_distance, time_distance, RelevanceModel};
use ctes_retrieval::retrieval::{average_precision, ndcg_at, rank, reciprocal_rank};
use ctes_retrieval::seed::rng;
use ctes_retrieval::trainer::{hinge_term, Adam};
use ctes_retrieval::unwarp::{quadrature, Unwarp, UnwarpConfig, QUAD_INTERVALS};
use ctes_retrieval::EventSequence;

fn sorted_times(raw: Vec<f64>) -> Vec<f64> {
    let mut t = 0.0;
    raw.into_iter()
        .map(|g| {
            t += g;
            t
        })
        .collect()
}

fn seq(id: &str, gaps: Vec<f64>, marks: Vec<usize>) -> EventSequence {
    let times = sorted_times(gaps);
    let horizon = times.last().copied().unwrap_or(0.0) + 0.1;
    EventSequence::from_parts(id, &times, &marks, horizon)
}

/// `f(x) = sum(tanh(A x + b) * exp(-x^2)) + logsumexp(x) * x_0`.
fn composite(a: &[f64], b: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len();
    let tape = Tape::new();
    let xv = tape.param(Tensor::column(x.to_vec()));
    let av = tape.constant(Tensor::new(n, n, a.to_vec()));
    let bv = tape.constant(Tensor::column(b.to_vec()));
    let h = (av.matmul(xv) + bv).tanh();
    let w = (xv.square() * -1.0).exp();
    let f = (h * w).sum() + xv.logsumexp() * xv.slice_rows(0, 1).sum();
    let g = tape.backward(f).unwrap();
    (f.item(), g.wrt(xv).into_data())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reverse_mode_matches_central_differences(
        x in prop::collection::vec(-1.5f64..1.5, 3),
        a in prop::collection::vec(-1.0f64..1.0, 9),
        b in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let (_, g) = composite(&a, &b, &x);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (composite(&a, &b, &xp).0 - composite(&a, &b, &xm).0) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1.0), "coord {}: {} vs {}", i, g[i], fd);
        }
    }

    #[test]
    fn gradients_are_linear(
        x in prop::collection::vec(-1.0f64..1.0, 4),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let grad = |ka: f64, kb: f64| {
            let tape = Tape::new();
            let v = tape.param(Tensor::column(x.clone()));
            let f = v.tanh().sum() * ka + v.square().exp().sum() * kb;
            tape.backward(f).unwrap().wrt(v).into_data()
        };
        let combined = grad(alpha, beta);
        let (ga, gb) = (grad(1.0, 0.0), grad(0.0, 1.0));
        for i in 0..x.len() {
            prop_assert!((combined[i] - (alpha * ga[i] + beta * gb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn unwarp_preserves_order(
        gaps in prop::collection::vec(1e-3f64..0.5, 1..40),
        seed in 0u64..1000,
    ) {
        let cfg = UnwarpConfig { hidden: (8, 8), ..Default::default() };
        let u = Unwarp::new(cfg, &mut rng(seed));
        let times = sorted_times(gaps);
        let out = u.apply(&times, 0.0);
        prop_assert!(out.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn quadrature_is_converged(
        gaps in prop::collection::vec(1e-2f64..0.3, 1..20),
        seed in 0u64..1000,
    ) {
        let cfg = UnwarpConfig { hidden: (16, 16), ..Default::default() };
        let u = Unwarp::new(cfg, &mut rng(seed));
        let times = sorted_times(gaps);
        let integrate = |n: usize| {
            let (nodes, w) = quadrature(&times, n);
            let rates: Vec<f64> = nodes.iter().map(|&t| u.rate(t)).collect();
            w.matmul(&Tensor::column(rates)).into_data()
        };
        let (coarse, fine) = (integrate(QUAD_INTERVALS), integrate(2 * QUAD_INTERVALS));
        for (c, f) in coarse.iter().zip(&fine) {
            prop_assert!((c - f).abs() < 1e-6);
        }
    }

    #[test]
    fn distances_are_symmetric_and_vanish_on_self(
        gq in prop::collection::vec(1e-3f64..0.5, 1..20),
        gc in prop::collection::vec(1e-3f64..0.5, 1..20),
        mq in prop::collection::vec(0usize..4, 20),
        mc in prop::collection::vec(0usize..4, 20),
    ) {
        let q = sorted_times(gq);
        let c = sorted_times(gc);
        let horizon = q.last().unwrap().max(*c.last().unwrap()) + 1.0;
        let d = time_distance(&q, &c, horizon).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - time_distance(&c, &q, horizon).unwrap()).abs() < 1e-9);
        prop_assert_eq!(time_distance(&q, &q, horizon).unwrap(), 0.0);
        let (mq, mc) = (&mq[..q.len()], &mc[..c.len()]);
        prop_assert_eq!(mark_distance(mq, mc), mark_distance(mc, mq));
        prop_assert_eq!(mark_distance(mq, mq), 0.0);
    }

    #[test]
    fn metrics_are_bounded(
        labels in prop::collection::vec(any::<bool>(), 1..40),
        extra in 0usize..5,
    ) {
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("c{i:02}")).collect();
        let ranking: Vec<&str> = ids.iter().map(String::as_str).collect();
        let relevant: HashSet<&str> = ranking.iter().zip(&labels).filter(|(_, &l)| l).map(|(id, _)| *id).collect();
        let total = relevant.len() + extra;
        for v in [
            average_precision(&ranking, &relevant, total),
            reciprocal_rank(&ranking, &relevant),
            ndcg_at(&ranking, &relevant, total, 10),
        ] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        // With k at least the number of relevant items the ideal DCG is
        // fixed, so NDCG@k can only grow with k.
        let mut prev = 0.0;
        for k in total.max(1)..=ranking.len() + 1 {
            let v = ndcg_at(&ranking, &relevant, total, k);
            prop_assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn ranking_is_sorted_with_id_ties(scores in prop::collection::vec(0u8..4, 1..30)) {
        let scored: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &s)| (format!("c{i:02}"), f64::from(s))).collect();
        let r = rank(scored, usize::MAX);
        for w in r.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn hinge_vanishes_exactly_past_the_margin(sp in -2.0f64..2.0, sn in -2.0f64..2.0, delta in 0.0f64..1.0) {
        let h = hinge_term(sp, sn, delta);
        prop_assert!(h >= 0.0);
        prop_assert_eq!(h == 0.0, sp - sn >= delta);
    }

    #[test]
    fn adam_is_sign_symmetric(g in prop::collection::vec(-3.0f64..3.0, 1..6), steps in 1usize..6) {
        let mut a = Adam::new(g.len());
        let mut b = Adam::new(g.len());
        let mut pa = vec![0.0; g.len()];
        let mut pb = vec![0.0; g.len()];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        for _ in 0..steps {
            a.step(&mut pa, &g, 0.01).unwrap();
            b.step(&mut pb, &neg, 0.01).unwrap();
        }
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn index_partitions_the_corpus(
        bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 8), 1..60),
        tables in 1usize..5,
        l in 1usize..=8,
        seed in 0u64..100,
    ) {
        let codes: Vec<(String, HashCode)> = bits
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("c{i}"), HashCode(b.iter().map(|&x| if x { 1 } else { -1 }).collect())))
            .collect();
        let idx = HashIndex::build(&codes, tables, l, seed).unwrap();
        for t in &idx.tables {
            prop_assert_eq!(t.positions.len(), l);
            let mut seen: Vec<&String> = t.buckets.values().flatten().collect();
            prop_assert_eq!(seen.len(), codes.len());
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), codes.len());
        }
        for (id, code) in &codes {
            prop_assert!(idx.candidates(code).contains(id));
        }
    }

    #[test]
    fn hyperplane_codes_are_antisymmetric(v in prop::collection::vec(-1.0f64..1.0, 6), seed in 0u64..100) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let h = RandomHyperplanes::new(6, 16, seed);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let (a, b) = (h.code(&v), h.code(&neg));
        for (x, y) in a.0.iter().zip(&b.0) {
            prop_assert!(x.abs() == 1 && y.abs() == 1);
            prop_assert_eq!(*x, -*y);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kernel_self_similarity_is_one(
        gaps in prop::collection::vec(1e-2f64..0.4, 1..25),
        marks in prop::collection::vec(0usize..3, 25),
        seed in 0u64..1000,
    ) {
        let s = seq("s", gaps.clone(), marks[..gaps.len()].to_vec());
        for variant in [Variant::SelfAttention, Variant::CrossAttention] {
            let model = MtppModel::new(ModelConfig::new(variant, 4, 3), &mut rng(seed));
            let scorer = RelevanceModel::new(model, Unwarp::identity(UnwarpConfig { hidden: (4, 4), ..Default::default() }));
            let k = scorer.fisher_kernel(&s, &s).unwrap();
            prop_assert!((k - 1.0).abs() < 1e-6, "{:?}: {}", variant, k);
        }
    }
}
