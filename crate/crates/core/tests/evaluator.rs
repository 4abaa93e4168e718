mod common;

use krlm_core::dataset::DirectedQuery;
use krlm_core::evaluator::{
    prediction_line, rank_of, ranks, read_score_dump, report, score_all, score_query, trace_lines, write_score_dump,
    Precision, Protocol, QueryScores, RankingMetrics,
};
use krlm_core::predictor::{fuse, fuse_and_rank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scores_with(q: DirectedQuery, fused: Vec<f64>, memory: Vec<usize>) -> QueryScores {
    QueryScores {
        head: q.head,
        rel: q.rel,
        answer: q.answer,
        inverse: q.inverse,
        index: q.index,
        struct_scores: fused.clone(),
        krlm_scores: fused.clone(),
        fused,
        memory,
        trace: Vec::new(),
    }
}

#[test]
fn reciprocal_rank_arithmetic() {
    let m = RankingMetrics::from_ranks([2, 4]);
    assert_eq!(m.mrr, 0.375);
    assert_eq!(m.hit10, 1.0);
    assert_eq!(m.count, 2);
    let m = RankingMetrics::from_ranks([1, 11]);
    assert_eq!(m.hit10, 0.5);
    assert_eq!(RankingMetrics::from_ranks([]).count, 0);
}

#[test]
fn fusion_is_the_plain_average() {
    let (fused, order) = fuse_and_rank(&[0.9, 0.1], &[0.2, 0.8]);
    assert!((fused[0] - 0.55).abs() < 1e-15 && (fused[1] - 0.45).abs() < 1e-15);
    assert_eq!(order, vec![0, 1]);
    // a candidate ahead on both scorers is ahead after fusion
    let (_, order) = fuse_and_rank(&[0.3, 0.7, 0.5], &[0.2, 0.9, 0.8]);
    assert_eq!(order[0], 1);
}

#[test]
fn rank_matches_sorting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let n = rng.random_range(1..40);
        // coarse values force ties
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let k: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let fused = fuse(&s, &k);
        let answer = rng.random_range(0..n);
        let mut excluded: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        excluded.sort_unstable();
        assert_eq!(rank_of(&fused, answer, &excluded), common::brute_rank(&fused, answer, &excluded));
        assert_eq!(rank_of(&fused, answer, &[]), common::brute_rank(&fused, answer, &[]));
        let (_, order) = fuse_and_rank(&s, &k);
        assert_eq!(order.iter().position(|&e| e == answer).unwrap() + 1, rank_of(&fused, answer, &[]));
    }
}

#[test]
fn random_scores_match_the_uniform_rank_expectation() {
    // With i.i.d. continuous scores the rank is uniform on 1..=I, so
    // E[1/r] = H_I / I and Var[1/r] = (Σ 1/r²)/I − E².
    let n = 1000;
    let queries = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ranks: Vec<usize> = (0..queries)
        .map(|_| {
            let fused: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            rank_of(&fused, rng.random_range(0..n), &[])
        })
        .collect();
    let m = RankingMetrics::from_ranks(ranks);
    let mean: f64 = (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64;
    let second: f64 = (1..=n).map(|r| 1.0 / (r * r) as f64).sum::<f64>() / n as f64;
    let sigma = ((second - mean * mean) / queries as f64).sqrt();
    assert!((m.mrr - mean).abs() < 3.0 * sigma, "mrr {} vs {mean} ± {sigma}", m.mrr);
}

#[test]
fn perfect_scores_give_unit_metrics_and_filtering_never_hurts() {
    let split = common::toy_split(4, 12);
    let queries = split.directed_queries();
    assert!(!queries.is_empty());
    let n = split.ctx.kg.num_entities();
    let perfect: Vec<QueryScores> = queries
        .iter()
        .map(|&q| {
            let fused = (0..n).map(|e| if e == q.answer { 1.0 } else { 0.1 }).collect();
            scores_with(q, fused, vec![])
        })
        .collect();
    for protocol in [Protocol::Raw, Protocol::Filtered] {
        let rep = report("toy", &perfect, &split, protocol, 0);
        assert_eq!(rep.mrr, 1.0);
        assert_eq!(rep.hit10, 1.0);
        assert_eq!(rep.queries, queries.len());
        assert_eq!(rep.per_direction.tail.count + rep.per_direction.head.count, queries.len());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noisy: Vec<QueryScores> = queries
        .iter()
        .map(|&q| scores_with(q, (0..n).map(|_| rng.random()).collect(), vec![]))
        .collect();
    let raw = ranks(&noisy, &split, Protocol::Raw);
    let filtered = ranks(&noisy, &split, Protocol::Filtered);
    for (r, f) in raw.iter().zip(&filtered) {
        assert!(f <= r);
    }
}

#[test]
fn memory_size_decides_easy_and_hard() {
    let split = common::toy_split(6, 10);
    let queries = split.directed_queries();
    let n = split.ctx.kg.num_entities();
    for (k, all_easy) in [(n, true), (n + 5, true), (0, false)] {
        let (model, store) = common::tiny_model(&split.ctx.kg, 2, 8, k);
        let scores = score_all(&model, &store, &split.ctx, &queries, Precision::F64, 1).unwrap();
        let rep = report("toy", &scores, &split, Protocol::Filtered, k);
        if all_easy {
            assert_eq!(rep.easy_hard.easy.count, queries.len());
            assert_eq!(rep.easy_hard.hard.count, 0);
        } else {
            assert_eq!(rep.easy_hard.hard.count, queries.len());
            for q in &scores {
                assert!(q.trace.iter().all(|t| t.beta.is_empty()));
            }
        }
    }
}

#[test]
fn trace_and_predictions_are_consistent() {
    let split = common::toy_split(8, 12);
    let (model, store) = common::tiny_model(&split.ctx.kg, 2, 8, 4);
    let n = split.ctx.kg.num_entities();
    for q in split.directed_queries() {
        let s = score_query(&model, &store, &split.ctx, q, Precision::F64).unwrap();
        let mut order = s.prediction();
        order.sort_unstable();
        assert_eq!(order, (0..n).collect::<Vec<_>>());

        let lines = trace_lines(&s);
        assert_eq!(lines.len(), 1);
        for l in &lines {
            let total: f64 = l.alpha.iter().chain(&l.beta).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert_eq!(l.beta.len(), l.memory_entity_ids.len());
            assert_eq!(l.memory_entity_ids, s.memory);
            if s.is_easy() {
                let slot = l.memory_entity_ids.iter().position(|&e| e == s.answer).unwrap();
                assert_eq!(l.memory_struct_scores[slot], s.struct_scores[s.answer]);
            }
        }
        // memory holds the top struct scores
        let min_in = s.memory.iter().map(|&e| s.struct_scores[e]).fold(f64::INFINITY, f64::min);
        for e in (0..n).filter(|e| !s.memory.contains(e)) {
            assert!(s.struct_scores[e] <= min_in);
        }

        let line = prediction_line(&split.ctx, &s);
        assert_eq!(line.top10.len(), 10);
        assert_eq!(line.query[2], "?");
        let best = s.prediction()[0];
        assert_eq!(line.top10[0].entity, split.ctx.kg.entities()[best].name);
        assert!((line.top10[0].fused - (line.top10[0].struct_score + line.top10[0].krlm) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn score_dump_round_trips_and_reranks_exactly() {
    let split = common::toy_split(9, 12);
    let (model, store) = common::tiny_model(&split.ctx.kg, 1, 8, 3);
    let queries = split.directed_queries();
    let scores = score_all(&model, &store, &split.ctx, &queries, Precision::F64, 1).unwrap();
    let mut buf = Vec::new();
    write_score_dump(&mut buf, &scores).unwrap();
    let back = read_score_dump(&buf[..]).unwrap();
    assert_eq!(back.len(), scores.len());
    for (a, b) in scores.iter().zip(&back) {
        assert_eq!(a.fused, b.fused);
        assert_eq!(a.memory, b.memory);
    }
    let r = ranks(&scores, &split, Protocol::Filtered);
    for (q, &rank) in back.iter().zip(&r) {
        assert_eq!(rank, common::brute_rank(&q.fused, q.answer, split.filter.known(q.head, q.rel)));
    }
}

#[test]
fn parallel_scoring_preserves_order_and_values() {
    let split = common::toy_split(10, 12);
    let (model, store) = common::tiny_model(&split.ctx.kg, 1, 8, 3);
    let queries = split.directed_queries();
    let one = score_all(&model, &store, &split.ctx, &queries, Precision::F64, 1).unwrap();
    let many = score_all(&model, &store, &split.ctx, &queries, Precision::F64, 3).unwrap();
    assert_eq!(one, many);
    let low = score_all(&model, &store, &split.ctx, &queries, Precision::F32, 1).unwrap();
    for (a, b) in one.iter().zip(&low) {
        for (x, y) in a.fused.iter().zip(&b.fused) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}
