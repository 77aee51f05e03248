mod common;

use common::{max_abs_diff, rows, Ref};
use mention_nmt::mention::{
    build_mask_from_tags, classify_mentions, joint_loss, LossWeights, MentionMask,
};
use mention_nmt::model::layers::{key_mask, multi_head_attention};
use mention_nmt::model::{
    mention_param_names, Arch, Batch, Example, MaskMode, Model, ModelConfig,
};
use mention_nmt::tensor::{EmptyRows, Graph, Mask, ParamStore, Tensor};
use mention_nmt::text::MentionTag::{self, Mention as M, None as N};
use mention_nmt::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(d: usize, heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: d,
        d_ffn: 2 * d,
        heads,
        dropout: 0.0,
        cls_hidden: d,
        ..ModelConfig::tiny(Arch::Mention, vocab, vocab)
    }
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn classifier_store(w1: Tensor<f64>, b1: Tensor<f64>, w2: Tensor<f64>, b2: Tensor<f64>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("c.fc1.weight", w1).unwrap();
    s.insert("c.fc1.bias", b1).unwrap();
    s.insert("c.fc2.weight", w2).unwrap();
    s.insert("c.fc2.bias", b2).unwrap();
    s
}

#[test]
fn zero_weight_classifier_is_uninformative() {
    let store = classifier_store(
        Tensor::zeros(vec![4, 3]),
        Tensor::zeros(vec![3]),
        Tensor::zeros(vec![3, 1]),
        Tensor::zeros(vec![1]),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::with_params(&store);
    let h = g.input(random(&[2, 5, 4], &mut rng));
    let out = classify_mentions(&mut g, "c", h).unwrap();
    assert_eq!(g.shape(out.probs), &[2, 5]);
    assert!(g.value(out.probs).data().iter().all(|&p| p == 0.5));
}

#[test]
fn classifier_hand_oracle() {
    // h = [1, -2, 0.5, 3]; fc1: 4 -> 2; fc2: 2 -> 1
    let w1 = t(&[4, 2], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]);
    let b1 = t(&[2], &[0.05, -0.1]);
    let w2 = t(&[2, 1], &[1.5, -0.7]);
    let b2 = t(&[1], &[0.2]);
    let store = classifier_store(w1, b1, w2, b2);
    let mut g = Graph::with_params(&store);
    let h = g.input(t(&[1, 1, 4], &[1.0, -2.0, 0.5, 3.0]));
    let out = classify_mentions(&mut g, "c", h).unwrap();
    // hidden unit 0: 0.1 - 0.6 - 0.25 + 2.1 + 0.05 = 1.4
    // hidden unit 1: -0.2 - 0.8 + 0.3 - 2.4 - 0.1 = -3.2 -> relu 0
    // logit: 1.5 * 1.4 + 0.2 = 2.3
    let expected = 1.0 / (1.0 + (-2.3f64).exp());
    assert!((g.value(out.probs).data()[0] - expected).abs() < 1e-9);
    assert!((g.value(out.logits).data()[0] - 2.3).abs() < 1e-9);
}

#[test]
fn classifier_is_per_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = classifier_store(
        random(&[4, 6], &mut rng),
        random(&[6], &mut rng),
        random(&[6, 1], &mut rng),
        random(&[1], &mut rng),
    );
    let h = random(&[1, 5, 4], &mut rng);
    let run = |h: Tensor<f64>| {
        let mut g = Graph::with_params(&store);
        let x = g.input(h);
        let o = classify_mentions(&mut g, "c", x).unwrap();
        g.value(o.probs).data().to_vec()
    };
    let base = run(h.clone());
    // permutation equivariance
    let perm = [3usize, 0, 4, 1, 2];
    let mut permuted = vec![0.0; 20];
    for (dst, &src) in perm.iter().enumerate() {
        permuted[dst * 4..dst * 4 + 4].copy_from_slice(&h.data()[src * 4..src * 4 + 4]);
    }
    let out = run(t(&[1, 5, 4], &permuted));
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(out[dst], base[src]);
    }
    // perturbing position 2 touches only output 2
    let mut bumped = h.data().to_vec();
    bumped[8] += 0.75;
    let out = run(t(&[1, 5, 4], &bumped));
    for i in 0..5 {
        if i == 2 {
            assert_ne!(out[i], base[i]);
        } else {
            assert_eq!(out[i], base[i]);
        }
    }
}

#[test]
fn single_mention_gives_one_hot_attention() {
    let m = Model::<f64>::new(cfg(16, 4, 20), 3).unwrap();
    let batch = Batch::from_examples(&[&Example::untagged(vec![4, 5, 6, 7], vec![8, 9, 10])]).unwrap();
    let mut keep = vec![false; 5];
    keep[2] = true;
    let mask = MentionMask::new(1, 5, keep).unwrap();
    let mut g = m.graph();
    let f = m.forward(&mut g, &batch, &MaskMode::Given(mask)).unwrap();
    let block = f.decoded.mention.unwrap();
    let probs = g.value(block.attention.probs);
    assert_eq!(probs.shape(), &[1, 4, 4, 5]);
    for row in probs.data().chunks(5) {
        assert_eq!(row, &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }
}

#[test]
fn two_way_hand_softmax() {
    // 1 head, d = 2, identity projections: scores = q·k / sqrt(2)
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let mut store = ParamStore::new();
    for p in ["q_proj", "k_proj", "v_proj", "out_proj"] {
        store.insert(format!("m.{p}.weight"), eye.clone()).unwrap();
        store.insert(format!("m.{p}.bias"), Tensor::zeros(vec![2])).unwrap();
    }
    let mut g = Graph::with_params(&store);
    let q = g.input(t(&[1, 1, 2], &[1.0, 2.0]));
    let kv = g.input(t(&[1, 3, 2], &[0.5, 1.0, 3.0, 3.0, -1.0, 0.25]));
    let mask = Mask::new(vec![1, 1, 1, 3], vec![true, false, true]).unwrap();
    let att = multi_head_attention(&mut g, "m", q, kv, 1, &mask, EmptyRows::Zero).unwrap();
    let s0 = (0.5 + 2.0) / 2f64.sqrt();
    let s2 = (-1.0 + 0.5) / 2f64.sqrt();
    let p0 = s0.exp() / (s0.exp() + s2.exp());
    let p = g.value(att.probs).data();
    assert!((p[0] - p0).abs() < 1e-12);
    assert_eq!(p[1], 0.0);
    assert!((p[2] - (1.0 - p0)).abs() < 1e-12);
    let out = g.value(att.out).data();
    assert!((out[0] - (p0 * 0.5 + (1.0 - p0) * -1.0)).abs() < 1e-12);
    assert!((out[1] - (p0 * 1.0 + (1.0 - p0) * 0.25)).abs() < 1e-12);
}

/// Copies the last decoder layer's cross-attention into the mention
/// attention so the two sublayers share weights.
fn share_cross_attention(m: &mut Model<f64>) {
    let last = m.config().dec_layers - 1;
    for p in ["q_proj", "k_proj", "v_proj", "out_proj"] {
        for w in ["weight", "bias"] {
            let from = format!("decoder.layers.{last}.cross_attn.{p}.{w}");
            let to = format!("mention.attn.{p}.{w}");
            let v = m.params().by_name(&from).unwrap().clone();
            let id = m.params().id(&to).unwrap();
            *m.params_mut().get_mut(id) = v;
        }
    }
}

#[test]
fn all_ones_mask_equals_cross_attention() {
    let mut m = Model::<f64>::new(cfg(16, 4, 20), 5).unwrap();
    share_cross_attention(&mut m);
    let batch = Batch::from_examples(&[
        &Example::untagged(vec![4, 5, 6, 7], vec![8, 9]),
        &Example::untagged(vec![10, 11], vec![12, 13, 14]),
    ])
    .unwrap();
    let ones = MentionMask::new(2, 5, batch.src.pad.iter().map(|p| !p).collect()).unwrap();
    let mut g = m.graph();
    let f = m.forward(&mut g, &batch, &MaskMode::Given(ones)).unwrap();
    let block = f.decoded.mention.unwrap();
    let enc = &f.encoded.states;
    let mask = key_mask(&enc.pad, enc.batch, enc.len).unwrap();
    let cross = multi_head_attention(
        &mut g,
        "decoder.layers.0.cross_attn",
        f.decoded.h_ffn,
        enc.hidden,
        4,
        &mask,
        EmptyRows::Error,
    )
    .unwrap();
    let a = g.value(block.sublayer).data();
    let b = g.value(cross.out).data();
    assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
}

#[test]
fn empty_rows_take_gate_off_path() {
    let m = Model::<f64>::new(cfg(16, 4, 20), 6).unwrap();
    let r = Ref { model: &m };
    let src = [vec![4usize, 5, 6, 7], vec![10, 11, 12]];
    let tgt = [vec![8usize, 9], vec![12, 13, 14]];
    let batch = Batch::from_examples(&[
        &Example::untagged(src[0].clone(), tgt[0].clone()),
        &Example::untagged(src[1].clone(), tgt[1].clone()),
    ])
    .unwrap();
    let keep = vec![false, true, false, true, false, false, false, false, false, false];
    let mask = MentionMask::new(2, 5, keep.clone()).unwrap();
    let mut g = m.graph();
    let f = m.forward(&mut g, &batch, &MaskMode::Given(mask)).unwrap();
    let lp = g.value(f.decoded.log_probs);
    let off = m.log_probs(&batch, &MaskMode::Off).unwrap();
    // row 1 has no mentions: identical to the gate-off forward
    assert!(lp.data()[4 * 20..]
        .iter()
        .zip(&off.data()[4 * 20..])
        .all(|(a, b)| (a - b).abs() < 1e-6));
    // gated sublayer output is zero on that row
    let sub = g.value(f.decoded.mention.unwrap().sublayer).data();
    assert!(sub[4 * 16..].iter().all(|&x| x == 0.0));
    // both rows against the reference implementation
    for b in 0..2 {
        let tin: Vec<usize> = std::iter::once(1).chain(tgt[b].iter().copied()).collect();
        let oracle = r.mention_log_probs(&src[b], &tin, &keep[b * 5..b * 5 + src[b].len() + 1]);
        let ours = rows(lp.data(), lp.shape(), b, tin.len());
        assert!(max_abs_diff(&ours, &oracle) < 1e-9);
    }
}

#[test]
fn masked_positions_get_exactly_zero() {
    let m = Model::<f64>::new(cfg(16, 4, 20), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let examples: Vec<Example> = (0..3)
            .map(|_| {
                let ls = rng.random_range(1..7);
                let lt = rng.random_range(1..6);
                let src: Vec<usize> = (0..ls).map(|_| rng.random_range(4..20)).collect();
                let tags: Vec<MentionTag> =
                    (0..ls).map(|_| if rng.random_bool(0.4) { M } else { N }).collect();
                Example {
                    src,
                    tgt: (0..lt).map(|_| rng.random_range(4..20)).collect(),
                    src_tags: Some(tags),
                    tgt_tags: None,
                }
            })
            .collect();
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = Batch::from_examples(&refs).unwrap();
        let mask = build_mask_from_tags(
            batch.src.tags.as_ref().unwrap(),
            &batch.src.pad,
            batch.src.size,
            batch.src.len,
        )
        .unwrap();
        let mut g = m.graph();
        let f = m.forward(&mut g, &batch, &MaskMode::Gold).unwrap();
        assert_eq!(f.encoded.mask.as_ref().unwrap(), &mask);
        let probs = g.value(f.decoded.mention.unwrap().attention.probs);
        let (b, h, lq, lk) = {
            let s = probs.shape();
            (s[0], s[1], s[2], s[3])
        };
        for bi in 0..b {
            let row_mask = mask.row(bi);
            for r in 0..h * lq {
                let row = &probs.data()[(bi * h * lq + r) * lk..(bi * h * lq + r + 1) * lk];
                for j in 0..lk {
                    if !row_mask[j] {
                        assert_eq!(row[j], 0.0);
                    }
                }
                if mask.row_has_mention(bi) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

fn tagged_batch() -> Batch {
    Batch::from_examples(&[
        &Example {
            src: vec![4, 5, 6],
            tgt: vec![7, 8],
            src_tags: Some(vec![N, M, N]),
            tgt_tags: Some(vec![M, N]),
        },
        &Example {
            src: vec![9, 10],
            tgt: vec![11, 12, 13],
            src_tags: Some(vec![M, M]),
            tgt_tags: Some(vec![N, N, M]),
        },
    ])
    .unwrap()
}

#[test]
fn joint_loss_matches_recomputation() {
    let m = Model::<f64>::new(cfg(16, 4, 20), 8).unwrap();
    let batch = tagged_batch();
    let mut g = m.graph();
    let f = m.forward(&mut g, &batch, &MaskMode::Gold).unwrap();
    let (sc, tc) = (f.encoded.src_cls.unwrap(), f.decoded.tgt_cls.unwrap());
    let eps = 0.1;
    let loss = joint_loss(
        &mut g,
        f.decoded.log_probs,
        &batch.src,
        &batch.tgt,
        Some(&sc),
        Some(&tc),
        &LossWeights::default(),
        eps,
    )
    .unwrap();
    let v = loss.values(&g);

    // translation term from raw probabilities
    let lp = g.value(f.decoded.log_probs).data();
    let mut mt = 0.0;
    let mut n = 0.0;
    for (i, &y) in batch.tgt.output.iter().enumerate() {
        if batch.tgt.pad[i] {
            continue;
        }
        let row = &lp[i * 20..(i + 1) * 20];
        let probs: Vec<f64> = row.iter().map(|x| x.exp()).collect();
        let nll = -probs[y].ln();
        let uniform = -probs.iter().map(|p| p.ln()).sum::<f64>() / 20.0;
        mt += (1.0 - eps) * nll + eps * uniform;
        n += 1.0;
    }
    mt /= n;
    let bce = |probs: &[f64], gold: &[bool], pad: &[bool]| {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..probs.len() {
            if pad[i] {
                continue;
            }
            let p = probs[i];
            s += if gold[i] { -p.ln() } else { -(1.0 - p).ln() };
            n += 1.0;
        }
        s / n
    };
    let src = bce(
        g.value(sc.probs).data(),
        &batch.src.padded_tags().unwrap(),
        &batch.src.pad,
    );
    let tgt = bce(
        g.value(tc.probs).data(),
        &batch.tgt.padded_tags().unwrap(),
        &batch.tgt.pad,
    );
    assert!((v.mt - mt).abs() < 1e-9, "{} vs {mt}", v.mt);
    assert!((v.src - src).abs() < 1e-9);
    assert!((v.tgt - tgt).abs() < 1e-9);
    assert!((v.total - (mt + 0.1 * src + 0.1 * tgt)).abs() < 1e-9);
}

#[test]
fn missing_gold_tags_is_contract_error() {
    let m = Model::<f64>::new(cfg(16, 4, 20), 8).unwrap();
    let mut batch = tagged_batch();
    batch.tgt.tags = None;
    let mut g = m.graph();
    let f = m.forward(&mut g, &batch, &MaskMode::Gold).unwrap();
    let r = joint_loss(
        &mut g,
        f.decoded.log_probs,
        &batch.src,
        &batch.tgt,
        f.encoded.src_cls.as_ref(),
        f.decoded.tgt_cls.as_ref(),
        &LossWeights::default(),
        0.1,
    );
    assert!(matches!(r, Err(Error::Contract(_))));
    batch.src.tags = None;
    let mut g = m.graph();
    assert!(matches!(
        m.forward(&mut g, &batch, &MaskMode::Gold),
        Err(Error::Contract(_))
    ));
}

#[test]
fn every_mention_array_receives_gradient() {
    let m = Model::<f64>::new(cfg(16, 4, 20), 9).unwrap();
    let batch = tagged_batch();
    let mut g = m.graph();
    let f = m.forward(&mut g, &batch, &MaskMode::Gold).unwrap();
    let loss = joint_loss(
        &mut g,
        f.decoded.log_probs,
        &batch.src,
        &batch.tgt,
        f.encoded.src_cls.as_ref(),
        f.decoded.tgt_cls.as_ref(),
        &LossWeights::default(),
        0.1,
    )
    .unwrap();
    let grads = g.backward(loss.total).unwrap().into_param_grads(m.params().len());
    for name in mention_param_names(m.config()) {
        let id = m.params().id(&name).unwrap();
        assert!(grads.norm(id) > 0.0, "{name} has zero gradient");
    }
}
