mod common;

use krlm_core::instruction::{
    assemble, build_layout, vocabulary_items, Paa, Slot, SlotInputs, SlotMaps, Template, VocabItem,
};
use krlm_core::tokenizer::{Tokenizer, BOS, SLOT_WORD_HEAD, SLOT_WORD_REL};
use krlm_core::trainer::build_tokenizer;
use krlm_core::KrlmError;
use krlm_numerics::{ParamStore, Scope, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn paa_fixture() -> (ParamStore, Paa, krlm_numerics::ParamId) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = store
        .add("table", Tensor::from_fn(10, 8, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.1 - 0.5), false)
        .unwrap();
    let paa = Paa::new(&mut store, "paa", 8, 4, &mut rng).unwrap();
    (store, paa, table)
}

#[test]
fn single_token_pools_to_value_value_value_zero() {
    let (store, paa, table) = paa_fixture();
    let tape = Tape::<f64>::new();
    let s = Scope::new(&tape, &store);
    let out = paa.forward(&s, table, &[6], "x").unwrap();
    // x = row·W_down; pooled = [x ‖ x ‖ x ‖ 0]; out = pooled·W_fusion
    let row = store.tensor(table).row(6).to_vec();
    let down = store.tensor(paa.down);
    let fusion = store.tensor(paa.fusion);
    let x: Vec<f64> = (0..4)
        .map(|j| row.iter().enumerate().map(|(i, v)| v * down.get(i, j)).sum())
        .collect();
    let pooled: Vec<f64> = x.iter().chain(&x).chain(&x).copied().chain([0.0; 4]).collect();
    for j in 0..4 {
        let e: f64 = pooled.iter().enumerate().map(|(i, v)| v * fusion.get(i, j)).sum();
        assert!((tape.value(out).get(0, j) - e).abs() < 1e-14);
    }
}

#[test]
fn pooling_ignores_token_order() {
    let (store, paa, table) = paa_fixture();
    let tape = Tape::<f64>::new();
    let s = Scope::new(&tape, &store);
    let a = paa.forward(&s, table, &[1, 4, 9, 2], "x").unwrap();
    let b = paa.forward(&s, table, &[9, 2, 1, 4], "x").unwrap();
    assert!(tape.value(a).max_abs_diff(&tape.value(b)) < 1e-14);
}

#[test]
fn empty_tokenization_is_an_error() {
    let (store, paa, table) = paa_fixture();
    let tape = Tape::<f64>::new();
    let s = Scope::new(&tape, &store);
    assert!(matches!(
        paa.forward(&s, table, &[], "nameless"),
        Err(KrlmError::EmptyTokenization(n)) if n == "nameless"
    ));
}

#[test]
fn template_validation() {
    assert!(Template::parse("Vocabulary: {vocabulary} Q: [W_EH] [K_EH] [W_RQ] [K_RQ] A: [W_EH] [W_RQ]").is_ok());
    assert!(Template::parse("{vocabulary} [K_EH] [K_RQ] [W_RQ] [W_EH]").is_err());
    assert!(Template::parse("{vocabulary} [K_EH] [W_EH] [W_RQ]").is_err());
    assert!(Template::parse("[K_EH] [K_RQ] [W_EH] [W_RQ]").is_err());
}

#[test]
fn layout_slots_and_closing_pair() {
    let kg = common::graph(5, 2, &[(0, 0, 1), (1, 1, 2), (3, 0, 4)]).augment_inverses().unwrap();
    let template = Template::default_template();
    let tok = build_tokenizer(&kg, &template, 400);
    let items = vocabulary_items(0, 2, &[3, 0, 2, 4], 4);
    assert_eq!(
        items,
        vec![VocabItem::Entity(0), VocabItem::Relation(2), VocabItem::Entity(3), VocabItem::Entity(2)]
    );
    let layout = build_layout(&template, &tok, &kg, &items, 4, 512).unwrap();
    let m = layout.len();
    assert_eq!(layout.tokens[0], Tokenizer::special_id(BOS).unwrap());
    assert_eq!(layout.tokens[m - 2], Tokenizer::special_id(SLOT_WORD_HEAD).unwrap());
    assert_eq!(layout.tokens[m - 1], Tokenizer::special_id(SLOT_WORD_REL).unwrap());
    let kinds: Vec<Slot> = layout.slots.iter().map(|s| s.1).collect();
    assert_eq!(
        kinds,
        vec![Slot::WordHead, Slot::StructHead, Slot::WordRel, Slot::StructRel, Slot::WordHead, Slot::WordRel]
    );
    for &(pos, slot) in &layout.slots {
        assert!(pos < m, "{slot:?}");
    }
    let text = tok.decode(&layout.tokens);
    assert!(text.contains("entity 3"), "{text}");
    assert!(text.contains("inverse of relation 0"), "{text}");

    assert!(matches!(
        build_layout(&template, &tok, &kg, &items, 4, 10),
        Err(KrlmError::InstructionOverflow { limit: 10, .. })
    ));
}

#[test]
fn assembled_rows_come_from_table_or_slot_maps() {
    let kg = common::graph(3, 1, &[(0, 0, 1), (1, 0, 2)]).augment_inverses().unwrap();
    let template = Template::default_template();
    let tok = build_tokenizer(&kg, &template, 300);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = 8;
    let emb = store
        .add("emb", Tensor::from_fn(tok.vocab_size(), f, |i, j| (i as f64) + 0.01 * j as f64), false)
        .unwrap();
    let maps = SlotMaps::new(&mut store, "maps", 3, f, &mut rng).unwrap();
    let layout = build_layout(&template, &tok, &kg, &vocabulary_items(0, 0, &[1, 2], 3), 4, 512).unwrap();

    let tape = Tape::<f64>::new();
    let s = Scope::new(&tape, &store);
    let v = |x: f64| tape.constant(Tensor::row_vector(vec![x, 2.0 * x, -x]));
    let inputs = SlotInputs {
        word_head: v(1.0),
        struct_head: v(2.0),
        word_rel: v(3.0),
        struct_rel: v(4.0),
    };
    let x = assemble(&s, &layout, emb, &maps, &inputs).unwrap();
    let x = tape.value(x);
    assert_eq!(x.shape(), [layout.len(), f]);
    let map_row = |l: &krlm_core::nn::Linear, k: f64| -> Vec<f64> {
        let w = store.tensor(l.w);
        (0..f)
            .map(|j| k * w.get(0, j) + 2.0 * k * w.get(1, j) - k * w.get(2, j))
            .collect()
    };
    for (pos, &id) in layout.tokens.iter().enumerate() {
        let expect = match layout.slots.iter().find(|s| s.0 == pos).map(|s| s.1) {
            Some(Slot::WordHead) => map_row(&maps.word, 1.0),
            Some(Slot::StructHead) => map_row(&maps.structural, 2.0),
            Some(Slot::WordRel) => map_row(&maps.word, 3.0),
            Some(Slot::StructRel) => map_row(&maps.structural, 4.0),
            None => store.tensor(emb).row(id as usize).to_vec(),
        };
        for j in 0..f {
            assert!((x.get(pos, j) - expect[j]).abs() < 1e-12, "row {pos}");
        }
    }
}
