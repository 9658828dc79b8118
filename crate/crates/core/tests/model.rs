mod common;

use minibert::corruption::IGNORE;
use minibert::model::{masked_mlm_loss, nsp_loss, sentiment_loss, Batch, Bert, ModelConfig};
use minibert::tensor::{ParamStore, Tape, Tensor};
use minibert::tokenizer::{CLS, PAD, SEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(vocab: usize, hidden: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden_dim: hidden,
        num_layers: layers,
        num_heads: heads,
        ff_dim: 2 * hidden,
        max_len: 16,
        dropout: 0.0,
        tie_mlm_weights: false,
    }
}

/// Overwrites every parameter with uniform noise in [-scale, scale] so the
/// checks see gradients well away from zero.
fn randomize(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

fn set_param(model: &mut Bert<f64>, name: &str, value: impl Fn(usize) -> f64) {
    let id = model.params().id(name).unwrap();
    for (i, v) in model.params_mut().get_mut(id).value.data_mut().iter_mut().enumerate() {
        *v = value(i);
    }
}

fn param(model: &Bert<f64>, name: &str) -> Vec<f64> {
    model.params().value(model.params().id(name).unwrap()).data().to_vec()
}

fn single(ids: &[u32], segments: &[u8], mask: &[u8]) -> Batch {
    let mut b = Batch::new(ids.len());
    b.push(ids, segments, mask).unwrap();
    b
}

#[test]
fn zero_tables_embed_to_zero() {
    let mut model = Bert::<f64>::init(config(20, 8, 2, 1), 1).unwrap();
    for name in ["embeddings.token", "embeddings.position", "embeddings.segment"] {
        set_param(&mut model, name, |_| 0.0);
    }
    let mut tape = Tape::new(0);
    let x = model.embed_sum(&mut tape, &single(&[CLS, 7, 9, SEP], &[0, 0, 0, 0], &[1; 4])).unwrap();
    assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn segment_change_shifts_by_segment_difference() {
    let model = Bert::<f64>::init(config(20, 8, 2, 1), 2).unwrap();
    let ids = [CLS, 7, 9, SEP, 11, SEP];
    let mut tape = Tape::new(0);
    let a = model.embed_sum(&mut tape, &single(&ids, &[0; 6], &[1; 6])).unwrap();
    let b = model.embed_sum(&mut tape, &single(&ids, &[0, 0, 0, 0, 1, 1], &[1; 6])).unwrap();
    let seg = param(&model, "embeddings.segment");
    let (a, b) = (tape.value(a).data(), tape.value(b).data());
    for p in 0..6 {
        for j in 0..8 {
            let diff = b[p * 8 + j] - a[p * 8 + j];
            let expected = if p >= 4 { seg[8 + j] - seg[j] } else { 0.0 };
            assert!((diff - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn embed_shape_and_range_checks() {
    let model = Bert::<f32>::init(config(20, 8, 2, 1), 3).unwrap();
    let mut batch = Batch::new(9);
    batch.push(&[CLS, 5, 6, 7, SEP, 8, 9, SEP, PAD], &[0, 0, 0, 0, 0, 1, 1, 1, 0], &[1, 1, 1, 1, 1, 1, 1, 1, 0]).unwrap();
    batch.push(&[CLS, 5, SEP, PAD, PAD, PAD, PAD, PAD, PAD], &[0; 9], &[1, 1, 1, 0, 0, 0, 0, 0, 0]).unwrap();
    let mut tape = Tape::new(0);
    let x = model.embed(&mut tape, &batch, false).unwrap();
    assert_eq!(tape.shape(x), &[2, 9, 8]);
    let bad = single(&[CLS, 20, SEP], &[0; 3], &[1; 3]);
    assert!(model.embed(&mut tape, &bad, false).is_err());
    let bad_seg = single(&[CLS, 5, SEP], &[0, 2, 0], &[1; 3]);
    assert!(model.embed(&mut tape, &bad_seg, false).is_err());
}

#[test]
fn single_position_attention_is_value_projection() {
    let mut model = Bert::<f64>::init(config(20, 8, 1, 1), 4).unwrap();
    randomize(model.params_mut(), 0.5, 4);
    let x = [0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.0, 0.4];
    let mut tape = Tape::new(0);
    let xv = tape.constant(Tensor::new(&[1, 1, 8], x.to_vec()).unwrap());
    let mask = model.attention_mask(&mut tape, &single(&[CLS], &[0], &[1]));
    let (out, weights) = model.attention(&mut tape, xv, mask, 0, false).unwrap();
    assert_eq!(tape.value(weights).data(), &[1.0]);
    let (wv, bv) = (param(&model, "layer0.attention.value.weight"), param(&model, "layer0.attention.value.bias"));
    let (wo, bo) = (param(&model, "layer0.attention.output.weight"), param(&model, "layer0.attention.output.bias"));
    let v: Vec<f64> = (0..8).map(|j| bv[j] + (0..8).map(|i| x[i] * wv[i * 8 + j]).sum::<f64>()).collect();
    for j in 0..8 {
        let expected = bo[j] + (0..8).map(|i| v[i] * wo[i * 8 + j]).sum::<f64>();
        assert!((tape.value(out).data()[j] - expected).abs() < 1e-12);
    }
}

#[test]
fn equal_queries_and_keys_attend_uniformly_over_valid_positions() {
    let mut model = Bert::<f64>::init(config(20, 8, 2, 1), 5).unwrap();
    set_param(&mut model, "layer0.attention.query.weight", |_| 0.0);
    set_param(&mut model, "layer0.attention.key.weight", |_| 0.0);
    set_param(&mut model, "layer0.attention.query.bias", |i| i as f64 * 0.1);
    set_param(&mut model, "layer0.attention.key.bias", |i| 1.0 - i as f64 * 0.1);
    let batch = single(&[CLS, 5, 6, SEP, PAD, PAD], &[0; 6], &[1, 1, 1, 1, 0, 0]);
    let mut tape = Tape::new(0);
    let x = model.embed(&mut tape, &batch, false).unwrap();
    let mask = model.attention_mask(&mut tape, &batch);
    let (_, w) = model.attention(&mut tape, x, mask, 0, false).unwrap();
    assert_eq!(tape.shape(w), &[1, 2, 6, 6]);
    for row in tape.value(w).data().chunks(6) {
        for (k, &v) in row.iter().enumerate() {
            if k < 4 {
                assert!((v - 0.25).abs() < 1e-12);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
}

/// Straight-line 64-bit multi-head attention with no masking.
fn reference_attention(x: &[f64], l: usize, h: usize, heads: usize, model: &Bert<f64>) -> Vec<f64> {
    let proj = |name: &str, input: &[f64]| -> Vec<f64> {
        let w = param(model, &format!("layer0.attention.{name}.weight"));
        let b = param(model, &format!("layer0.attention.{name}.bias"));
        let mut out = vec![0.0; l * h];
        for p in 0..l {
            for j in 0..h {
                let mut s = b[j];
                for i in 0..h {
                    s += input[p * h + i] * w[i * h + j];
                }
                out[p * h + j] = s;
            }
        }
        out
    };
    let (q, k, v) = (proj("query", x), proj("key", x), proj("value", x));
    let d = h / heads;
    let mut ctx = vec![0.0; l * h];
    for head in 0..heads {
        let off = head * d;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|t| q[i * h + off + t] * k[j * h + off + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                ctx[i * h + off + t] = (0..l).map(|j| e[j] / z * v[j * h + off + t]).sum();
            }
        }
    }
    proj("output", &ctx)
}

#[test]
fn attention_matches_reference() {
    let mut model = Bert::<f64>::init(config(20, 8, 2, 1), 6).unwrap();
    randomize(model.params_mut(), 0.5, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new(0);
    let xv = tape.constant(Tensor::new(&[1, 4, 8], x.clone()).unwrap());
    let mask = model.attention_mask(&mut tape, &single(&[CLS, 5, 6, SEP], &[0; 4], &[1; 4]));
    let (out, _) = model.attention(&mut tape, xv, mask, 0, false).unwrap();
    let expected = reference_attention(&x, 4, 8, 2, &model);
    for (a, b) in tape.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn zero_layers_encode_equals_embed() {
    let model = Bert::<f32>::init(config(20, 8, 2, 0), 7).unwrap();
    let batch = single(&[CLS, 5, 6, SEP, 9, SEP], &[0, 0, 0, 0, 1, 1], &[1; 6]);
    let mut tape = Tape::new(0);
    let e = model.embed(&mut tape, &batch, false).unwrap();
    let h = model.encode(&mut tape, &batch, false).unwrap();
    assert_eq!(tape.value(e), tape.value(h));
}

#[test]
fn padded_ids_do_not_reach_valid_outputs() {
    let model = Bert::<f32>::init(config(30, 16, 2, 2), 8).unwrap();
    let mask = [1, 1, 1, 1, 1, 0, 0, 0];
    let segs = [0, 0, 0, 1, 1, 0, 0, 0];
    let a = single(&[CLS, 5, SEP, 7, SEP, PAD, PAD, PAD], &segs, &mask);
    let b = single(&[CLS, 5, SEP, 7, SEP, 22, 13, 9], &segs, &mask);
    let mut tape = Tape::new(0);
    let ha = model.encode(&mut tape, &a, false).unwrap();
    let hb = model.encode(&mut tape, &b, false).unwrap();
    let (ha, hb) = (tape.value(ha).data(), tape.value(hb).data());
    assert_eq!(ha[..5 * 16], hb[..5 * 16]);
}

#[test]
fn batch_order_does_not_leak() {
    let model = Bert::<f64>::init(config(30, 16, 2, 2), 9).unwrap();
    let rows: [(&[u32], &[u8], &[u8]); 2] = [
        (&[CLS, 5, SEP, 7, SEP, PAD], &[0, 0, 0, 1, 1, 0], &[1, 1, 1, 1, 1, 0]),
        (&[CLS, 11, 12, 13, 14, SEP], &[0; 6], &[1; 6]),
    ];
    let mut fwd = Batch::new(6);
    let mut rev = Batch::new(6);
    for r in &rows {
        fwd.push(r.0, r.1, r.2).unwrap();
    }
    for r in rows.iter().rev() {
        rev.push(r.0, r.1, r.2).unwrap();
    }
    let mut tape = Tape::new(0);
    let hf = model.encode(&mut tape, &fwd, false).unwrap();
    let hr = model.encode(&mut tape, &rev, false).unwrap();
    let (hf, hr) = (tape.value(hf).data(), tape.value(hr).data());
    let n = 6 * 16;
    assert_eq!(hf[..n], hr[n..]);
    assert_eq!(hf[n..], hr[..n]);
}

#[test]
fn attention_rows_are_distributions() {
    let mut model = Bert::<f64>::init(config(30, 16, 4, 1), 10).unwrap();
    randomize(model.params_mut(), 1.0, 10);
    let batch = single(&[CLS, 5, 6, SEP, 9, SEP, PAD], &[0, 0, 0, 0, 1, 1, 0], &[1, 1, 1, 1, 1, 1, 0]);
    let mut tape = Tape::new(0);
    let x = model.embed(&mut tape, &batch, false).unwrap();
    let mask = model.attention_mask(&mut tape, &batch);
    let (_, w) = model.attention(&mut tape, x, mask, 0, false).unwrap();
    for row in tape.value(w).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(row[6], 0.0);
    }
}

#[test]
fn zero_vocab_projection_is_uniform() {
    let mut model = Bert::<f64>::init(config(40, 8, 2, 1), 11).unwrap();
    set_param(&mut model, "mlm.weight", |_| 0.0);
    let batch = single(&[CLS, 5, 6, SEP], &[0; 4], &[1; 4]);
    let mut tape = Tape::new(0);
    let h = model.encode(&mut tape, &batch, false).unwrap();
    let logits = model.mlm_logits(&mut tape, h).unwrap();
    assert_eq!(tape.shape(logits), &[1, 4, 40]);
    let probs = tape.softmax(logits, 2).unwrap();
    assert!(tape.value(probs).data().iter().all(|&p| (p - 1.0 / 40.0).abs() < 1e-15));
}

#[test]
fn vocab_softmax_rows_sum_to_one_and_onehot_selects_row() {
    let mut model = Bert::<f64>::init(config(40, 8, 2, 1), 12).unwrap();
    randomize(model.params_mut(), 2.0, 12);
    let batch = single(&[CLS, 5, 6, SEP, 7, SEP], &[0, 0, 0, 0, 1, 1], &[1; 6]);
    let mut tape = Tape::new(0);
    let h = model.encode(&mut tape, &batch, false).unwrap();
    let logits = model.mlm_logits(&mut tape, h).unwrap();
    let probs = tape.softmax(logits, 2).unwrap();
    for row in tape.value(probs).data().chunks(40) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let mut onehot = vec![0.0; 8];
    onehot[3] = 1.0;
    let basis = tape.constant(Tensor::new(&[1, 1, 8], onehot).unwrap());
    let l = model.mlm_logits(&mut tape, basis).unwrap();
    let w = param(&model, "mlm.weight");
    assert_eq!(tape.value(l).data(), &w[3 * 40..4 * 40]);
}

#[test]
fn zero_heads_give_neutral_outputs() {
    let mut model = Bert::<f64>::init(config(30, 8, 2, 1), 13).unwrap();
    for name in ["nsp.weight", "nsp.bias", "sentiment.weight", "sentiment.bias"] {
        set_param(&mut model, name, |_| 0.0);
    }
    let mut batch = Batch::new(4);
    batch.push(&[CLS, 5, SEP, PAD], &[0; 4], &[1, 1, 1, 0]).unwrap();
    batch.push(&[CLS, 6, 7, SEP], &[0; 4], &[1; 4]).unwrap();
    let mut tape = Tape::new(0);
    let h = model.encode(&mut tape, &batch, false).unwrap();
    let nsp = model.nsp_logits(&mut tape, h).unwrap();
    assert_eq!(tape.shape(nsp), &[2, 2]);
    assert!(tape.value(nsp).data().iter().all(|&v| v == 0.0));
    let s = model.sentiment_score(&mut tape, h).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn sentiment_scores_stay_in_open_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for seed in 0..20 {
        let mut model = Bert::<f64>::init(config(30, 8, 2, 1), seed).unwrap();
        randomize(model.params_mut(), 3.0, seed);
        let ids: Vec<u32> = (0..6).map(|_| rng.gen_range(5..30)).collect();
        let mut tape = Tape::new(0);
        let h = model.encode(&mut tape, &single(&ids, &[0; 6], &[1; 6]), false).unwrap();
        let s = model.sentiment_score(&mut tape, h).unwrap();
        let y = tape.value(s).item();
        assert!(y > 0.0 && y < 1.0);
    }
}

#[test]
fn sentiment_head_gradient_matches_finite_differences() {
    let mut model = Bert::<f64>::init(config(30, 8, 2, 1), 15).unwrap();
    randomize(model.params_mut(), 0.5, 15);
    let enc = model.clone();
    let mut batch = Batch::new(5);
    batch.push(&[CLS, 5, 6, SEP, PAD], &[0; 5], &[1, 1, 1, 1, 0]).unwrap();
    batch.push(&[CLS, 9, 10, 11, SEP], &[0; 5], &[1; 5]).unwrap();
    let (worst, at) = common::max_grad_rel_error(model.params_mut(), 1e-4, 1e-8, |tape, store| {
        let m = Bert::from_params(enc.config().clone(), store.clone()).unwrap();
        let h = m.encode(tape, &batch, false).unwrap();
        let s = m.sentiment_score(tape, h).unwrap();
        sentiment_loss(tape, s, &[1, 0]).unwrap()
    });
    assert!(worst < 1e-3, "{worst} at {at}");
}

#[test]
fn mlm_loss_analytic_cases() {
    let mut tape = Tape::<f64>::new(0);
    let uniform = tape.constant(Tensor::zeros(&[1, 3, 100]));
    let loss = masked_mlm_loss(&mut tape, uniform, &[IGNORE, 17, 42]).unwrap();
    assert!((tape.value(loss).item() - 100f64.ln()).abs() < 1e-12);
    let mut peaked = vec![0.0; 300];
    peaked[100 + 17] = 50.0;
    peaked[200 + 42] = 50.0;
    let logits = tape.constant(Tensor::new(&[1, 3, 100], peaked).unwrap());
    let loss = masked_mlm_loss(&mut tape, logits, &[IGNORE, 17, 42]).unwrap();
    assert!(tape.value(loss).item() < 1e-18);
}

#[test]
fn unselected_logits_do_not_affect_mlm_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let labels = [IGNORE, 3, IGNORE, IGNORE, 8, IGNORE];
    let base: Vec<f32> = (0..60).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let eval = |data: Vec<f32>| {
        let mut tape = Tape::<f32>::new(0);
        let l = tape.leaf(Tensor::new(&[1, 6, 10], data).unwrap());
        let loss = masked_mlm_loss(&mut tape, l, &labels).unwrap();
        let v = tape.value(loss).item();
        let g = tape.backward(loss, &mut ParamStore::new()).unwrap().get(l).unwrap().data().to_vec();
        (v, g)
    };
    let (v0, g0) = eval(base.clone());
    for p in [0usize, 2, 3, 5] {
        assert!(g0[p * 10..(p + 1) * 10].iter().all(|&g| g == 0.0));
        let mut perturbed = base.clone();
        for j in 0..10 {
            perturbed[p * 10 + j] += rng.gen_range(-100.0..100.0);
        }
        assert_eq!(eval(perturbed).0.to_bits(), v0.to_bits());
    }
}

#[test]
fn no_selected_positions_gives_zero_loss() {
    let mut tape = Tape::<f64>::new(0);
    let l = tape.leaf(Tensor::full(&[1, 2, 5], 1.5));
    let loss = masked_mlm_loss(&mut tape, l, &[IGNORE, IGNORE]).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
    let g = tape.backward(loss, &mut ParamStore::new()).unwrap();
    assert!(g.get(l).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn full_model_gradient_check() {
    let cfg = config(50, 16, 2, 2);
    let mut model = Bert::<f64>::init(cfg.clone(), 17).unwrap();
    randomize(model.params_mut(), 0.3, 17);
    let mut batch = Batch::new(8);
    batch.push(&[CLS, 4, 12, SEP, 30, 4, SEP, PAD], &[0, 0, 0, 0, 1, 1, 1, 0], &[1, 1, 1, 1, 1, 1, 1, 0]).unwrap();
    batch.push(&[CLS, 20, 21, 4, 23, SEP, 49, SEP], &[0, 0, 0, 0, 0, 0, 1, 1], &[1; 8]).unwrap();
    let labels = [IGNORE, 7, IGNORE, IGNORE, IGNORE, 18, IGNORE, IGNORE, IGNORE, IGNORE, IGNORE, 22, IGNORE, IGNORE, IGNORE, IGNORE];
    let (worst, at) = common::max_grad_rel_error(model.params_mut(), 1e-4, 1e-7, |tape, store| {
        let m = Bert::from_params(cfg.clone(), store.clone()).unwrap();
        let h = m.encode(tape, &batch, false).unwrap();
        let logits = m.mlm_logits(tape, h).unwrap();
        let mlm = masked_mlm_loss(tape, logits, &labels).unwrap();
        let nsp_logits = m.nsp_logits(tape, h).unwrap();
        let nsp = nsp_loss(tape, nsp_logits, &[true, false]).unwrap();
        tape.add(mlm, nsp).unwrap()
    });
    assert!(worst < 1e-3, "{worst} at {at}");
}

#[test]
fn parameter_count_matches_layout() {
    for layers in [0, 1, 3] {
        for tie in [false, true] {
            let cfg = ModelConfig { num_layers: layers, tie_mlm_weights: tie, ..config(30, 8, 2, 1) };
            assert_eq!(minibert::model::parameter_count(&cfg), Some(minibert::model::parameter_layout(&cfg).len()));
        }
    }
    let huge = ModelConfig { num_layers: usize::MAX, ..config(30, 8, 2, 1) };
    assert_eq!(minibert::model::parameter_count(&huge), None);
}
