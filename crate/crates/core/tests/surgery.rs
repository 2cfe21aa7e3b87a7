use adaptkit::model::checkpoint::expected_shapes;
use adaptkit::model::{
    decoder_only_forward, decoder_only_hidden_states, encdec_forward, encoder_forward, ArchKind,
    MaskKind, ModelConfig, NamedCheckpoint,
};
use adaptkit::surgery::{
    adapt, adapt_balanced, adapt_unbalanced, expand_gqa_to_mha, merge_uniform, AdaptationPlan,
    ExpandScope,
};
use adaptkit::{Error, Tensor};
use proptest::prelude::*;

fn source(layers: usize, seed: u64) -> NamedCheckpoint {
    NamedCheckpoint::init_random(ArchKind::decoder_only(ModelConfig::new(layers, 16, 32, 4, 2, 4)), seed)
        .unwrap()
}

#[test]
fn balanced_copies_encoder_and_cross_attention() {
    let src = source(4, 1);
    let before = src.clone();
    let ed = adapt_balanced(&src).unwrap();
    ed.validate().unwrap();
    assert!(src.same_tensors(&before));
    assert_eq!(ed.meta().encoder_mask, MaskKind::Bidirectional);
    for (name, t) in src.iter() {
        if let Some(rest) = name.strip_prefix("dec.") {
            assert!(ed.tensor(&format!("enc.{rest}")).unwrap().same_bits(t));
        }
        assert!(ed.tensor(name).unwrap().same_bits(t));
    }
    for i in 0..4 {
        for p in ["q", "k", "v", "o"] {
            let x = ed.tensor(&format!("dec.{i}.xattn.{p}")).unwrap();
            assert!(x.same_bits(src.tensor(&format!("dec.{i}.attn.{p}")).unwrap()));
        }
    }
}

#[test]
fn causal_encoder_reproduces_source_hiddens() {
    let src = source(2, 2);
    let ed = adapt_balanced(&src).unwrap();
    let tokens: Vec<u32> = (0..12).map(|i| (i * 37 % 256) as u32).collect();
    let a = encoder_forward(&ed, &tokens, MaskKind::Causal).unwrap();
    let b = decoder_only_hidden_states(&src, &tokens).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn balanced_rejects_encoder_decoder_source() {
    let ed = adapt_balanced(&source(1, 0)).unwrap();
    assert!(matches!(adapt_balanced(&ed), Err(Error::Surgery(_))));
    let plan = AdaptationPlan {
        mode: adaptkit::surgery::AdaptMode::Balanced,
        ..AdaptationPlan::unbalanced(source(1, 0), source(2, 0), 0, 0)
    };
    assert!(matches!(adapt(&plan), Err(Error::Surgery(_))));
}

#[test]
fn unbalanced_shapes_follow_encoder_width() {
    let arch = ArchKind::from_preset("L-S").unwrap();
    let shapes = expected_shapes(&arch);
    assert_eq!(shapes["dec.0.xattn.k"], vec![1024, 8 * 64]);
    assert_eq!(shapes["dec.0.xattn.q"], vec![512, 512]);

    let enc = NamedCheckpoint::init_random(
        ArchKind::decoder_only(ModelConfig::new(3, 24, 48, 6, 3, 4)),
        5,
    )
    .unwrap();
    let dec = source(2, 6);
    let plan = AdaptationPlan::unbalanced(enc.clone(), dec.clone(), 5, 42);
    let a = adapt_unbalanced(&plan).unwrap();
    let b = adapt_unbalanced(&plan).unwrap();
    assert!(a.same_tensors(&b));
    assert_eq!(a.meta().warmup_steps, Some(5));
    assert_eq!(a.tensor("dec.1.xattn.k").unwrap().shape(), &[24, 8]);
    assert!(a.tensor("enc.emb.tok").unwrap().same_bits(enc.tensor("emb.tok").unwrap()));
    assert!(a.tensor("enc.2.ffn.up").unwrap().same_bits(enc.tensor("dec.2.ffn.up").unwrap()));
    assert!(a.tensor("dec.1.ffn.up").unwrap().same_bits(dec.tensor("dec.1.ffn.up").unwrap()));

    let other = adapt_unbalanced(&AdaptationPlan { init_seed: 43, ..plan.clone() }).unwrap();
    assert!(!other.tensor("dec.0.xattn.q").unwrap().same_bits(a.tensor("dec.0.xattn.q").unwrap()));

    let zero = adapt_unbalanced(&AdaptationPlan { zero_init_output: true, ..plan }).unwrap();
    assert!(zero.tensor("dec.0.xattn.o").unwrap().data().iter().all(|&v| v == 0.0));
    encdec_forward(&zero, &[1, 2, 3], &[4, 5]).unwrap();
}

#[test]
fn cross_attention_init_std_matches_scale() {
    let enc = NamedCheckpoint::init_random(
        ArchKind::decoder_only(ModelConfig::new(1, 64, 64, 4, 4, 16)),
        1,
    )
    .unwrap();
    let dec = NamedCheckpoint::init_random(
        ArchKind::decoder_only(ModelConfig::new(1, 32, 64, 4, 4, 16)),
        2,
    )
    .unwrap();
    let mut plan = AdaptationPlan::unbalanced(enc, dec, 0, 9);
    plan.cross_attn_init_scale = 0.5;
    let ed = adapt_unbalanced(&plan).unwrap();
    let k = ed.tensor("dec.0.xattn.k").unwrap();
    let var = k.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / k.numel() as f64;
    let want = 0.5 / 64f64.sqrt();
    assert!((var.sqrt() - want).abs() < 0.1 * want);
}

fn gqa_source(seed: u64) -> NamedCheckpoint {
    NamedCheckpoint::init_random(ArchKind::decoder_only(ModelConfig::new(2, 32, 64, 8, 4, 4)), seed)
        .unwrap()
}

#[test]
fn gqa_expansion_preserves_function() {
    let src = gqa_source(3);
    let mha = expand_gqa_to_mha(&src, ExpandScope::All).unwrap();
    assert_eq!(mha.arch().decoder().kv_heads, 8);
    assert_eq!(mha.tensor("dec.0.attn.k").unwrap().numel(), 2 * src.tensor("dec.0.attn.k").unwrap().numel());
    let tokens: Vec<u32> = (0..9).map(|i| i * 29 % 256).collect();
    let a = decoder_only_forward(&src, &tokens).unwrap();
    let b = decoder_only_forward(&mha, &tokens).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
    let twice = expand_gqa_to_mha(&mha, ExpandScope::All).unwrap();
    assert!(twice.same_tensors(&mha));
    assert_eq!(twice.arch(), mha.arch());
    let untouched = expand_gqa_to_mha(&src, ExpandScope::Encoder).unwrap();
    assert!(untouched.same_tensors(&src));
}

#[test]
fn gqa_expansion_scopes_in_encoder_decoder() {
    let ed = adapt_balanced(&gqa_source(4)).unwrap();
    let dec_only = expand_gqa_to_mha(&ed, ExpandScope::Decoder).unwrap();
    assert_eq!(dec_only.arch().encoder().unwrap().kv_heads, 4);
    assert_eq!(dec_only.arch().decoder().kv_heads, 8);
    assert_eq!(dec_only.tensor("dec.1.xattn.v").unwrap().shape(), &[32, 32]);
    let input = [5, 6, 7, 8];
    let target = [1, 2, 3];
    let a = encdec_forward(&ed, &input, &target).unwrap();
    for scope in [ExpandScope::Encoder, ExpandScope::Decoder, ExpandScope::All] {
        let b = encdec_forward(&expand_gqa_to_mha(&ed, scope).unwrap(), &input, &target).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}

#[test]
fn merge_identities() {
    let a = source(2, 8);
    let b = source(2, 9);
    let aa = merge_uniform(&a, &a).unwrap();
    assert!(aa.same_tensors(&a));
    assert_eq!(aa.meta().parents, vec![a.content_hash(), a.content_hash()]);

    let (meta, tensors) = a.clone().into_parts();
    let neg = NamedCheckpoint::new(
        meta,
        tensors.into_iter().map(|(k, t)| (k, t.map(|v| -v))).collect(),
    )
    .unwrap();
    let z = merge_uniform(&a, &neg).unwrap();
    assert!(z.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));

    let ab = merge_uniform(&a, &b).unwrap();
    let w = ab.tensor("dec.0.attn.q").unwrap().data()[3];
    let want = (a.tensor("dec.0.attn.q").unwrap().data()[3] + b.tensor("dec.0.attn.q").unwrap().data()[3]) * 0.5;
    assert_eq!(w, want);
}

#[test]
fn merge_reports_name_difference() {
    let err = merge_uniform(&source(1, 1), &source(2, 1)).unwrap_err();
    match err {
        Error::Surgery(msg) => assert!(msg.contains("dec.1.attn.q"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn balanced_xattn_equals_attn(layers in 1usize..4, seed in 0u64..1000) {
        let ed = adapt_balanced(&source(layers, seed)).unwrap();
        for i in 0..layers {
            for p in ["q", "k", "v", "o"] {
                let x: &Tensor = ed.tensor(&format!("dec.{i}.xattn.{p}")).unwrap();
                let attn = ed.tensor(&format!("dec.{i}.attn.{p}")).unwrap();
                prop_assert!(x.same_bits(attn));
            }
        }
    }
}
