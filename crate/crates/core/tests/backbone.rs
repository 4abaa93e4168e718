use krlm_core::backbone::{positional_encoding, Backbone, BackboneConfig};
use krlm_numerics::ParamStore;

fn build(seed: u64) -> (Backbone, ParamStore) {
    let mut store = ParamStore::new();
    let b = Backbone::init(&BackboneConfig::new(2, 64, 300, seed), &mut store).unwrap();
    (b, store)
}

#[test]
fn initialization_is_seeded_and_frozen() {
    let (_, a) = build(3);
    let (_, b) = build(3);
    let (_, c) = build(4);
    assert_eq!(Backbone::checksum(&a), Backbone::checksum(&b));
    assert_ne!(Backbone::checksum(&a), Backbone::checksum(&c));
    assert_eq!(a.trainable_count(), 0);
    assert!(a.iter().all(|(_, p)| p.name.starts_with("backbone.")));
}

#[test]
fn weights_have_inverse_sqrt_width_scale() {
    let (b, store) = build(1);
    let emb = store.tensor(b.emb);
    let n = emb.len() as f64;
    let mean = emb.data().iter().sum::<f64>() / n;
    let sd = (emb.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((sd - 0.125).abs() < 0.005, "sd {sd}");
    assert!(mean.abs() < 0.005);
    assert_eq!(store.tensor(b.proj), emb);
    assert!(store.tensor(b.layers[1].norm_ffn).data().iter().all(|&x| x == 1.0));
}

#[test]
fn rejects_bad_shapes() {
    let mut store = ParamStore::new();
    assert!(Backbone::init(&BackboneConfig::new(0, 64, 300, 0), &mut store).is_err());
    assert!(Backbone::init(&BackboneConfig::new(1, 63, 300, 0), &mut store).is_err());
}

#[test]
fn positions_are_bounded_and_distinct() {
    let pe = positional_encoding::<f64>(50, 32);
    let bound = 1.0 / 32f64.sqrt();
    assert!(pe.data().iter().all(|x| x.abs() <= bound + 1e-15));
    for i in 0..50 {
        for j in 0..i {
            let d: f64 = pe.row(i).iter().zip(pe.row(j)).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-6);
        }
    }
    // position 0: sin terms 0, cos terms at full scale
    assert_eq!(pe.get(0, 0), 0.0);
    assert!((pe.get(0, 1) - bound).abs() < 1e-15);
}
