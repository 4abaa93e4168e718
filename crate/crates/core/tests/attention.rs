use krlm_core::attention::{
    attention_layer, krl_attention_core, last_token_closed_form, plain_attention_core, run_stack, MemoryWeights,
};
use krlm_core::backbone::{Backbone, BackboneConfig};
use krlm_numerics::{ParamStore, Scope, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(f: usize, d: usize, seed: u64) -> (ParamStore, Backbone, MemoryWeights) {
    let mut store = ParamStore::new();
    let mut cfg = BackboneConfig::new(2, f, 64, seed);
    cfg.ffn = 2 * f;
    let bb = Backbone::init(&cfg, &mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mem = MemoryWeights::new(&mut store, "mem", 2, f, d, &mut rng).unwrap();
    (store, bb, mem)
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn empty_memory_is_bit_identical_to_plain_layer() {
    let (store, bb, mw) = fixture(16, 6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in [1, 2, 7] {
        let tape = Tape::<f64>::new();
        let s = Scope::new(&tape, &store);
        let h = tape.constant(random(&mut rng, m, 16));
        let empty = tape.constant(Tensor::zeros(0, 6));
        let (a, _) = attention_layer(&s, &bb, &mw, 0, h, Some(empty)).unwrap();
        let (b, _) = attention_layer(&s, &bb, &mw, 0, h, None).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }
}

#[test]
fn last_row_matches_closed_form() {
    let (store, bb, mw) = fixture(12, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let m = rng.random_range(1..8);
        let k = rng.random_range(0..5);
        let x = random(&mut rng, m, 12);
        let mem = random(&mut rng, k, 5);
        let tape = Tape::<f64>::new();
        let s = Scope::new(&tape, &store);
        let (out, probs) =
            krl_attention_core(&s, &bb, &mw, 1, tape.constant(x.clone()), tape.constant(mem.clone())).unwrap();
        let l = &bb.layers[1];
        let (h, alpha, beta) = last_token_closed_form(
            &x,
            &mem,
            store.tensor(l.wq),
            store.tensor(l.wk),
            store.tensor(l.wv),
            store.tensor(mw.mq[1]),
            store.tensor(mw.mv[1]),
        );
        let out = tape.value(out);
        for (j, v) in h.iter().enumerate() {
            assert!((out.get(m - 1, j) - v).abs() < 1e-10);
        }
        let p = tape.value(probs);
        let last = p.row(m - 1);
        for (i, b) in beta.iter().enumerate() {
            assert!((last[i] - b).abs() < 1e-12);
        }
        for (i, a) in alpha.iter().enumerate() {
            assert!((last[k + i] - a).abs() < 1e-12);
        }
        let total: f64 = alpha.iter().chain(&beta).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn tokens_never_attend_forward() {
    let (store, bb, mw) = fixture(8, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, 5, 8);
    let mut y = x.clone();
    y.row_mut(4).iter_mut().for_each(|v| *v += 1.0);
    let mem = random(&mut rng, 3, 4);
    let tape = Tape::<f64>::new();
    let s = Scope::new(&tape, &store);
    let memv = tape.constant(mem);
    let (a, pa) = krl_attention_core(&s, &bb, &mw, 0, tape.constant(x), memv).unwrap();
    let (b, _) = krl_attention_core(&s, &bb, &mw, 0, tape.constant(y), memv).unwrap();
    for i in 0..4 {
        assert_eq!(tape.value(a).row(i), tape.value(b).row(i));
    }
    let p = tape.value(pa);
    for i in 0..5 {
        for j in (3 + i + 1)..(3 + 5) {
            assert_eq!(p.get(i, j), 0.0);
        }
        // every row sees the full memory
        assert!(p.row(i)[..3].iter().all(|&v| v > 0.0));
    }
}

#[test]
fn single_token_attends_to_itself_and_memory() {
    let (store, bb, mw) = fixture(8, 4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tape = Tape::<f64>::new();
    let s = Scope::new(&tape, &store);
    let x = tape.constant(random(&mut rng, 1, 8));
    let (out, _) = plain_attention_core(&s, &bb, 0, x).unwrap();
    // one visible position: output is exactly x·W_V
    let v = tape.matmul(x, s.var(bb.layers[0].wv)).unwrap();
    assert!(tape.value(out).max_abs_diff(&tape.value(v)) < 1e-15);
    let mem = tape.constant(random(&mut rng, 2, 4));
    let (_, p) = krl_attention_core(&s, &bb, &mw, 0, x, mem).unwrap();
    assert!((tape.value(p).sum() - 1.0).abs() < 1e-12);
}

#[test]
fn stack_trace_is_normalized_per_layer() {
    let (store, bb, mw) = fixture(8, 4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tape = Tape::<f64>::new();
    let s = Scope::new(&tape, &store);
    let emb = tape.constant(random(&mut rng, 6, 8));
    let mem = tape.constant(random(&mut rng, 3, 4));
    let (h, trace) = run_stack(&s, &bb, &mw, emb, mem).unwrap();
    assert_eq!(tape.shape(h), [6, 8]);
    assert_eq!(trace.len(), 2);
    for t in &trace {
        assert_eq!(t.alpha.len(), 6);
        assert_eq!(t.beta.len(), 3);
        let total: f64 = t.alpha.iter().chain(&t.beta).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let empty = tape.constant(Tensor::zeros(0, 4));
    let (_, trace) = run_stack(&s, &bb, &mw, emb, empty).unwrap();
    assert!(trace.iter().all(|t| t.beta.is_empty()));
}

#[test]
fn zero_memory_rows_renormalize() {
    // Appending zero embeddings adds exp(0)-weight columns; the direct
    // softmax over the extended logits must still match.
    let (store, bb, mw) = fixture(8, 4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, 3, 8);
    let mem = random(&mut rng, 2, 4);
    let mut doubled = Tensor::zeros(4, 4);
    for i in 0..2 {
        doubled.row_mut(i).copy_from_slice(mem.row(i));
    }
    let tape = Tape::<f64>::new();
    let s = Scope::new(&tape, &store);
    let (_, p1) = krl_attention_core(&s, &bb, &mw, 0, tape.constant(x.clone()), tape.constant(mem)).unwrap();
    let (_, p2) = krl_attention_core(&s, &bb, &mw, 0, tape.constant(x), tape.constant(doubled)).unwrap();
    let (p1, p2) = (tape.value(p1), tape.value(p2));
    for i in 0..3 {
        let z2: f64 = p2.row(i).iter().sum();
        assert!((z2 - 1.0).abs() < 1e-12);
        // ratios between surviving columns are unchanged
        let r1 = p1.get(i, 0) / p1.get(i, 2);
        let r2 = p2.get(i, 0) / p2.get(i, 4);
        assert!((r1 - r2).abs() < 1e-9 * r1.abs().max(1.0));
        // the zero rows carry equal weight
        assert!((p2.get(i, 2) - p2.get(i, 3)).abs() < 1e-15);
    }
}
