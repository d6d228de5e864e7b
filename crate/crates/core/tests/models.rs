//! End-to-end properties of the model assemblies.

use longsum_core::attention::AttentionMask;
use longsum_core::models::{
    longformer_from_bert, DecodeMode, EncoderKind, Lf2Bert, MaskedLm, ModelConfig, ModelError,
    PgnConfig, PgnExample, PgnModel, PgnSwitch, Seq2SeqExample, WordVocab,
};
use longsum_core::tensor::{
    decode_checkpoint, encode_checkpoint, softmax_rows, Checkpoint, Dtype, GradCheck, Tape,
    TensorError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lift(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Contract {
            op: "model",
            msg: other.to_string(),
        },
    }
}

fn tiny_lf2bert_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(2, 2, 32, 64, 24, 12, 200, 2);
    cfg.attention.global_indices = vec![0];
    cfg
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(6..vocab)).collect()
}

#[test]
fn lf2bert_end_to_end_gradients() {
    let mut cfg = tiny_lf2bert_config();
    cfg.init_std = 0.2;
    let model = Lf2Bert::new(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ex = Seq2SeqExample {
        history: random_ids(&mut rng, 20, 200),
        globals: vec![1, 2],
        target: random_ids(&mut rng, 6, 200),
    };
    let report = GradCheck::default()
        .sampled(12, 3)
        .run(&model.params, |tape, store| {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
            model
                .loss(tape, store, &ex, true, &mut drop_rng)
                .map(|(l, _)| l)
                .map_err(lift)
        })
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn bert_end_to_end_gradients() {
    let mut cfg = ModelConfig::new(2, 2, 16, 32, 12, 8, 40, 1);
    cfg.init_std = 0.2;
    let model = MaskedLm::bert(cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = random_ids(&mut rng, 10, 40);
    let labels: Vec<u32> = ids
        .iter()
        .enumerate()
        .map(|(i, &t)| if i % 3 == 0 { t } else { u32::MAX })
        .collect();
    let report = GradCheck::default()
        .sampled(15, 4)
        .run(&model.params, |tape, store| {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let mask = AttentionMask::with_length(10, 8);
            model
                .mlm_loss(tape, store, &ids, &labels, Some(&mask), true, &mut r)
                .map_err(lift)
        })
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn padding_tail_never_changes_real_positions() {
    let mut cfg = ModelConfig::new(2, 2, 16, 32, 12, 8, 40, 1);
    cfg.dropout = 0.0;
    for kind in [EncoderKind::Dense, EncoderKind::Windowed] {
        let model = MaskedLm::new(cfg.clone(), kind, 4).unwrap();
        let mask = AttentionMask::with_length(8, 5);
        let run = |tail: [u32; 3]| {
            let ids = [7, 8, 9, 10, 11, tail[0], tail[1], tail[2]];
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = model
                .logits(&mut tape, &model.params, &ids, Some(&mask), &[], false, &mut r)
                .unwrap();
            tape.value(out).data()[..5 * 40].to_vec()
        };
        assert_eq!(run([3, 3, 3]), run([3, 30, 12]));
    }
}

#[test]
fn tiling_invariant_sixteen_to_forty() {
    let cfg = ModelConfig::new(2, 2, 16, 32, 16, 8, 50, 2);
    let bert = MaskedLm::bert(cfg, 11).unwrap();
    let long = longformer_from_bert(&bert, 40).unwrap();
    let old = bert.params.by_name("encoder.embeddings.position").unwrap();
    let new = long.params.by_name("encoder.embeddings.position").unwrap();
    assert_eq!(new.rows(), 40);
    for i in 0..40 {
        let (a, b) = (new.row_slice(i), old.row_slice(i % 16));
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for (name, id) in bert.params.names() {
        if name != "encoder.embeddings.position" {
            let a = bert.params.get(id).data();
            let b = long.params.by_name(name).unwrap().data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
        }
    }
}

#[test]
fn tied_gradient_is_sum_of_untied_twin_gradients() {
    let mut cfg = tiny_lf2bert_config();
    cfg.dropout = 0.0;
    let tied = Lf2Bert::new(cfg.clone(), 6).unwrap();
    let mut untied_cfg = cfg.clone();
    untied_cfg.tie_embeddings = false;
    let mut untied = Lf2Bert::new(untied_cfg, 6).unwrap();
    for (name, id) in tied.params.names() {
        untied.params.insert(name, tied.params.get(id).clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ex = Seq2SeqExample {
        history: random_ids(&mut rng, 18, 200),
        globals: vec![],
        target: random_ids(&mut rng, 5, 200),
    };
    let grads = |m: &mut Lf2Bert| {
        let mut tape = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (loss, _) = m.loss(&mut tape, &m.params, &ex, false, &mut r).unwrap();
        m.params.zero_grad();
        let mut store = m.params.clone();
        tape.backward(loss, &mut store).unwrap();
        store
    };
    let mut tied = tied;
    let g_tied = grads(&mut tied);
    let g_untied = grads(&mut untied);
    let enc = g_untied.grad(g_untied.expect_id("encoder.embeddings.word").unwrap());
    let dec = g_untied.grad(g_untied.expect_id("decoder.embeddings.word").unwrap());
    let mut sum = enc.clone();
    sum.add_assign(dec);
    let shared = g_tied.grad(g_tied.expect_id("encoder.embeddings.word").unwrap());
    assert!(shared.max_abs_diff(&sum) < 1e-10);
    assert!(dec.data().iter().any(|&g| g != 0.0));
}

#[test]
fn decoder_is_causal() {
    let mut cfg = tiny_lf2bert_config();
    cfg.dropout = 0.0;
    let m = Lf2Bert::new(cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let history = random_ids(&mut rng, 15, 200);
    let mut dec_in = random_ids(&mut rng, 8, 200);
    let run = |dec: &[u32]| {
        let mut tape = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = m.logits(&mut tape, &m.params, &history, &[], dec, false, &mut r).unwrap();
        tape.value(out).clone()
    };
    let mut before = run(&dec_in);
    for t in 1..8 {
        dec_in[t] = 6 + (dec_in[t] + 17) % 190;
        let after = run(&dec_in);
        for r in 0..t {
            assert_eq!(before.row_slice(r), after.row_slice(r), "row {r} changed by position {t}");
        }
        assert_ne!(before.row_slice(t), after.row_slice(t));
        before = after;
    }
}

#[test]
fn encoder_receptive_field_is_bounded() {
    let mut cfg = tiny_lf2bert_config();
    cfg.dropout = 0.0;
    cfg.attention.global_indices = vec![];
    let (r, layers) = (cfg.attention.radius, cfg.num_layers);
    let m = Lf2Bert::new(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut history = random_ids(&mut rng, 24, 200);
    let encode = |h: &[u32]| {
        let mut tape = Tape::new();
        let mut rr = ChaCha8Rng::seed_from_u64(0);
        let (enc, _, _) = m.encode(&mut tape, &m.params, h, &[], false, &mut rr).unwrap();
        tape.value(enc).clone()
    };
    let before = encode(&history);
    let j: usize = 11;
    history[j] = 6 + (history[j] + 50) % 190;
    let after = encode(&history);
    for i in 0..24usize {
        if i.abs_diff(j) > r * layers {
            assert_eq!(before.row_slice(i), after.row_slice(i), "position {i}");
        }
    }
    assert_ne!(before.row_slice(j), after.row_slice(j));
}

#[test]
fn output_distributions_sum_to_one() {
    let m = Lf2Bert::new(tiny_lf2bert_config(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let history = random_ids(&mut rng, 20, 200);
    let dec = random_ids(&mut rng, 6, 200);
    let mut tape = Tape::new();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let logits = m.logits(&mut tape, &m.params, &history, &[], &dec, false, &mut r).unwrap();
    let p = softmax_rows(tape.value(logits), None).unwrap();
    for row in 0..p.rows() {
        assert!((p.row_slice(row).iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    let pgn = small_pgn();
    let ex = PgnExample {
        source: words("a b zz c d zz"),
        target: words("zz c yy"),
    };
    let mut tape = Tape::new();
    let (mix, _) = pgn.forward(&mut tape, &pgn.params, &ex, PgnSwitch::Learned).unwrap();
    let t = tape.value(mix);
    assert_eq!(t.rows(), 4);
    for row in 0..t.rows() {
        assert!((t.row_slice(row).iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn small_pgn() -> PgnModel {
    let texts = [words("a b c d e f g"), words("a b c")];
    let vocab = WordVocab::build(texts.iter().map(|t| t.as_slice()), 12);
    let cfg = PgnConfig {
        emb_dim: 5,
        hidden_dim: 4,
        attn_dim: 3,
        max_source_len: 30,
        max_target_len: 10,
        init_std: 0.4,
    };
    PgnModel::new(cfg, vocab, 3).unwrap()
}

#[test]
fn pgn_gradients() {
    let pgn = small_pgn();
    let ex = PgnExample {
        source: words("a b zz c d zz e"),
        target: words("zz c yy e"),
    };
    let report = GradCheck::default()
        .run(&pgn.params, |tape, store| pgn.loss(tape, store, &ex).map(|(l, _)| l).map_err(lift))
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn beam_of_one_matches_greedy_for_both_models() {
    let m = Lf2Bert::new(tiny_lf2bert_config(), 12).unwrap();
    let history: Vec<u32> = (6..26).collect();
    let g = m.generate(&history, &[], DecodeMode::Greedy, 6).unwrap();
    let b = m.generate(&history, &[], DecodeMode::Beam(1), 6).unwrap();
    assert_eq!(g, b);
    assert!(g.len() <= 6);

    let pgn = small_pgn();
    let src = words("a b c zz d");
    let g = pgn.generate(&src, DecodeMode::Greedy, 5).unwrap();
    let b = pgn.generate(&src, DecodeMode::Beam(1), 5).unwrap();
    assert_eq!(g, b);
}

#[test]
fn checkpoints_round_trip_and_validate() {
    let m = Lf2Bert::new(tiny_lf2bert_config(), 13).unwrap();
    let bytes = encode_checkpoint(&m.params, &m.metadata(), Dtype::F64);
    let back = Lf2Bert::from_checkpoint(decode_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(back.config, m.config);
    for (name, id) in m.params.names() {
        assert_eq!(m.params.get(id), back.params.by_name(name).unwrap());
    }
    // the alias survives: one storage for both word tables
    assert_eq!(
        back.params.expect_id("decoder.embeddings.word").unwrap(),
        back.params.expect_id("encoder.embeddings.word").unwrap()
    );

    let mut meta = m.metadata();
    meta.insert("config.hidden_size".into(), "16".into());
    meta.insert("config.ffn_size".into(), "64".into());
    let bad = Checkpoint {
        params: m.params.clone(),
        metadata: meta,
    };
    assert!(matches!(Lf2Bert::from_checkpoint(bad), Err(ModelError::Config(_))));

    let pgn = small_pgn();
    let bytes = encode_checkpoint(&pgn.params, &pgn.metadata(), Dtype::F32);
    let back = PgnModel::from_checkpoint(decode_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(back.vocab, pgn.vocab);
    assert!(matches!(
        MaskedLm::from_checkpoint(decode_checkpoint(&bytes).unwrap()),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn assembled_model_reuses_pretrained_parts() {
    let mut cfg = tiny_lf2bert_config();
    cfg.max_positions_encoder = 16;
    let bert = MaskedLm::bert(cfg.clone(), 14).unwrap();
    let long = longformer_from_bert(&bert, 24).unwrap();
    let m = Lf2Bert::from_pretrained(&long, &bert, 15).unwrap();
    let same = |a: &str, b: &str, store_b: &longsum_core::tensor::ParamStore| {
        assert_eq!(m.params.by_name(a).unwrap(), store_b.by_name(b).unwrap(), "{a}");
    };
    same("decoder.layer1.attn.q.w", "encoder.layer1.attn.q.w", &bert.params);
    same("decoder.layer0.ffn.out.b", "encoder.layer0.ffn.out.b", &bert.params);
    same("encoder.embeddings.position", "encoder.embeddings.position", &long.params);
    let pos = m.params.by_name("decoder.embeddings.position").unwrap();
    let bert_pos = bert.params.by_name("encoder.embeddings.position").unwrap();
    assert_eq!(pos.rows(), 12);
    assert_eq!(pos.data(), &bert_pos.data()[..pos.len()]);
    assert!(m.params.by_name("decoder.layer0.cross.q.w").is_some());
    assert_eq!(
        m.params.by_name("decoder.embeddings.word").unwrap(),
        long.params.by_name("encoder.embeddings.word").unwrap()
    );
}
