use sydes::config::RunConfig;
use sydes::data::Task;
use sydes::image::{sample_mask, MaskSpec};
use sydes::losses::{cls_loss, itc_loss};
use sydes::model::{Ctx, ModelConfig, SampleInput, SyDes};
use sydes::pipeline::{fresh_model, Corpus};
use sydes::rng::{RngState, Stream};
use sydes::tensor::concat;
use sydes::text::CLS;
use sydes::{Tape, Tensor};

fn setup() -> (SyDes<f64>, Corpus) {
    let cfg = RunConfig { model: ModelConfig::tiny(16, 12), ..RunConfig::default() };
    let corpus = Corpus::synthetic(&cfg, [3, 0, 0], 9).unwrap();
    (fresh_model(&cfg, &corpus).unwrap(), corpus)
}

fn sample(corpus: &Corpus) -> SampleInput<f64> {
    corpus.train.iter().map(|p| p.input.clone()).max_by_key(|s| s.text.last_real).unwrap()
}

#[test]
fn text_encoder_is_causal() {
    let (model, corpus) = setup();
    let s = sample(&corpus);
    let t = s.text.last_real.unwrap();
    assert!(t >= 1);
    let mut edited = s.text.clone();
    edited.ids[t] = if edited.ids[t] == 3 { 4 } else { 3 };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params);
    let a = model.text_encoder.encode(&ctx, &s.text).unwrap().to_tensor();
    let b = model.text_encoder.encode(&ctx, &edited).unwrap().to_tensor();
    for r in 0..t {
        assert_eq!(a.row(r), b.row(r), "row {r} saw a later token");
    }
    assert_ne!(a.row(t), b.row(t));
}

#[test]
fn image_encoder_is_permutation_equivariant() {
    let (model, corpus) = setup();
    let s = sample(&corpus);
    let p = s.subs[0].shape()[0];
    let perm: Vec<usize> = (0..p).map(|i| (i * 5 + 3) % p).collect();
    let rows = |order: &[usize]| {
        let d = s.subs[0].shape()[1];
        let data: Vec<f64> = order.iter().flat_map(|&i| s.subs[0].row(i).to_vec()).collect();
        Tensor::new(vec![order.len(), d], data).unwrap()
    };
    let ident: Vec<usize> = (0..p).collect();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params);
    let a = model.image_encoder.forward(&ctx, ctx.constant(&rows(&ident)), &ident).unwrap().to_tensor();
    let b = model.image_encoder.forward(&ctx, ctx.constant(&rows(&perm)), &perm).unwrap().to_tensor();
    let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-12);
    assert!(close(a.row(0), b.row(0)));
    for (k, &i) in perm.iter().enumerate() {
        assert!(close(a.row(i + 1), b.row(k + 1)), "patch {i}");
    }
}

#[test]
fn decoder_row_counts() {
    let (model, corpus) = setup();
    let s = sample(&corpus);
    let p = model.image_config().num_patches();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params);
    let mut rng = RngState::new(2).stream(Stream::Mask);
    let masks: Vec<MaskSpec> = (0..4).map(|_| sample_mask(p, 0.75, &mut rng).unwrap()).collect();
    let enc = model.encode(&ctx, &s, &masks).unwrap();
    assert_eq!(enc.v_sub[0].shape(), [p / 4 + 1, 16]);
    let input = model.image_decoder.build_input(&ctx, enc.v_sub[0], &masks[0]).unwrap();
    assert_eq!(input.d_in.shape(), [p + 1, 16]);
    assert_eq!(input.num_masked, 3 * p / 4);
    let out = model.pretrain_sample(&ctx, &s, &masks).unwrap();
    assert_eq!(out.reconstructions[0].pixels.unwrap().shape()[0], 3 * p / 4);
    assert_eq!(out.alpha.shape(), [4, 1]);
    let ft = model.finetune_sample(&ctx, Task::Sentiment, &s, None).unwrap();
    assert_eq!(ft.fused.w_tilde.shape(), [11, 16]);
    assert_eq!(ft.fused.cross_attention[0].shape(), [11, 5 * (p + 1)]);
    assert_eq!(ft.logits.shape(), [1, 3]);
}

#[test]
fn saturated_gate_selects_one_source() {
    let (mut model, corpus) = setup();
    let s = sample(&corpus);
    let b = model.image_decoder.gate_img.b.unwrap();
    let p = model.image_config().num_patches();
    for (bias, image_side) in [(1000.0, true), (-1000.0, false)] {
        model.params.get_mut(b).tensor.data_mut().fill(bias);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params);
        let full = vec![MaskSpec::full(p); 4];
        let enc = model.encode(&ctx, &s, &full).unwrap();
        let pooled = model.image_decoder.pooled_text(enc.w, &s.text).unwrap().values();
        let input = model.image_decoder.build_input(&ctx, enc.v_sub[0], &full[0]).unwrap();
        let comb = model.image_decoder.gated_fusion(
            &ctx,
            input.d_in,
            model.image_decoder.pooled_text(enc.w, &s.text).unwrap(),
        );
        let comb = comb.unwrap().to_tensor();
        let d_in = input.d_in.to_tensor();
        for r in 0..p + 1 {
            let want = if image_side { d_in.row(r) } else { &pooled[..] };
            assert_eq!(comb.row(r), want, "row {r}");
        }
    }
}

#[test]
fn classification_loss_never_reaches_the_cls_embedding() {
    let (model, corpus) = setup();
    let s = sample(&corpus);
    let cls_row = |g: &[f64]| g[CLS as usize * 16..(CLS as usize + 1) * 16].to_vec();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params);
    let out = model.finetune_sample(&ctx, Task::Desire, &s, None).unwrap();
    let loss = cls_loss(out.logits, &[2], std::slice::from_ref(&s.id)).unwrap();
    let g = tape.backward(loss).unwrap();
    let tok = g.param(model.text_encoder.tok).unwrap();
    assert!(cls_row(tok).iter().all(|&x| x == 0.0));
    assert!(tok.iter().any(|&x| x != 0.0));

    // The contrastive term does use it.
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params);
    let batch: Vec<_> =
        corpus.train.iter().map(|p| model.finetune_sample(&ctx, Task::Desire, &p.input, None).unwrap()).collect();
    let img = concat(&batch.iter().map(|b| b.v_proj).collect::<Vec<_>>(), 0).unwrap().l2_normalize().unwrap();
    let txt = concat(&batch.iter().map(|b| b.w_proj).collect::<Vec<_>>(), 0).unwrap().l2_normalize().unwrap();
    let g = tape.backward(itc_loss(img, txt, 0.07).unwrap()).unwrap();
    assert!(cls_row(g.param(model.text_encoder.tok).unwrap()).iter().any(|&x| x != 0.0));
}

#[test]
fn zeroed_head_gives_uniform_logits() {
    let (mut model, corpus) = setup();
    let s = sample(&corpus);
    for task in Task::ALL {
        let fc2 = model.head(task).mlp.fc2.clone();
        model.params.get_mut(fc2.w).tensor.data_mut().fill(0.0);
        model.params.get_mut(fc2.b.unwrap()).tensor.data_mut().fill(0.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params);
        let out = model.finetune_sample(&ctx, task, &s, None).unwrap();
        assert!(out.logits.values().iter().all(|&x| x == 0.0));
        let loss = cls_loss(out.logits, &[0], std::slice::from_ref(&s.id)).unwrap().item();
        assert!((loss - (task.num_classes() as f64).ln()).abs() < 1e-12);
    }
}
