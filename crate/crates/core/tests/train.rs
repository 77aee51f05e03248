use mention_nmt::mention::LossWeights;
use mention_nmt::model::{mention_param_names, Arch, Batch, Example, MaskMode, Model, ModelConfig};
use mention_nmt::tensor::Tensor;
use mention_nmt::text::MentionTag::{Mention as M, None as N};
use mention_nmt::train::{
    build_batches, dev_perplexity, token_batches, train, train_step, warm_start, OutputSpec,
    StepLog, TrainConfig, TrainState,
};
use mention_nmt::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(arch: Arch) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 16,
        d_ffn: 32,
        heads: 2,
        cls_hidden: 16,
        ..ModelConfig::tiny(arch, 24, 24)
    }
}

fn tcfg() -> TrainConfig {
    TrainConfig {
        lr0: 3e-3,
        warmup_steps: 5,
        max_epochs: 2,
        token_batch_size: 60,
        ..TrainConfig::default()
    }
}

fn corpus(n: usize, seed: u64, tagged: bool) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..6);
            let src: Vec<usize> = (0..len).map(|_| rng.random_range(4..24)).collect();
            // target: reversed source, a learnable mapping
            let tgt: Vec<usize> = src.iter().rev().copied().collect();
            let tags = |s: &[usize]| s.iter().map(|&x| if x % 3 == 0 { M } else { N }).collect();
            Example {
                src_tags: tagged.then(|| tags(&src)),
                tgt_tags: tagged.then(|| tags(&tgt)),
                src,
                tgt,
            }
        })
        .collect()
}

#[test]
fn repeated_steps_overfit_one_batch() {
    let mut model = Model::<f32>::new(cfg(Arch::Mention), 1).unwrap();
    let data = corpus(6, 1, true);
    let refs: Vec<&Example> = data.iter().collect();
    let batch = Batch::from_examples(&refs).unwrap();
    let c = tcfg();
    let mut state = TrainState::new(&model, &c);
    let first = train_step(&mut model, &mut state, &batch, 0, 1, &c).unwrap();
    let mut last = first.clone();
    for _ in 0..9 {
        last = train_step(&mut model, &mut state, &batch, 0, 1, &c).unwrap();
    }
    assert!(last.total < first.total, "{} !< {}", last.total, first.total);
    assert!(last.l_src > 0.0 && last.l_tgt > 0.0);
    assert_eq!(state.step, 10);
}

#[test]
fn baseline_path_is_translation_only_extension_with_masks_off() {
    let mut base_cfg = cfg(Arch::Baseline);
    base_cfg.dropout = 0.1;
    let mut ext_cfg = cfg(Arch::Mention);
    ext_cfg.dropout = 0.1;
    let mut base = Model::<f64>::new(base_cfg, 3).unwrap();
    let mut ext = Model::<f64>::new(ext_cfg, 4).unwrap();
    warm_start(&mut ext, &base).unwrap();
    // tags present but all non-mention: the gold mask is empty everywhere
    let mut data = corpus(5, 2, true);
    for e in &mut data {
        e.src_tags = Some(vec![N; e.src.len()]);
    }
    let refs: Vec<&Example> = data.iter().collect();
    let batch = Batch::from_examples(&refs).unwrap();
    let c = tcfg();
    let c_ext = TrainConfig {
        loss_weights: LossWeights::translation_only(),
        ..c.clone()
    };
    let mut sb = TrainState::new(&base, &c);
    let mut se = TrainState::new(&ext, &c_ext);
    for _ in 0..3 {
        let lb = train_step(&mut base, &mut sb, &batch, 0, 1, &c).unwrap();
        let le = train_step(&mut ext, &mut se, &batch, 0, 1, &c_ext).unwrap();
        assert_eq!(lb.total, le.total);
        assert_eq!(lb.l_mt, le.l_mt);
    }
    for (_, name, t) in base.params().iter() {
        assert_eq!(t.data(), ext.params().by_name(name).unwrap().data(), "{name}");
    }
}

#[test]
fn nan_parameters_abort_with_diagnostics() {
    let mut model = Model::<f32>::new(cfg(Arch::Baseline), 1).unwrap();
    let id = model.params().id("src_embed.weight").unwrap();
    model.params_mut().get_mut(id).data_mut().fill(f32::NAN);
    let data = corpus(3, 3, false);
    let refs: Vec<&Example> = data.iter().collect();
    let batch = Batch::from_examples(&refs).unwrap();
    let c = tcfg();
    let mut state = TrainState::new(&model, &c);
    match train_step(&mut model, &mut state, &batch, 7, 1, &c) {
        Err(Error::NanLoss { step, batch, .. }) => assert_eq!((step, batch), (1, 7)),
        other => panic!("expected NanLoss, got {other:?}"),
    }
}

#[test]
fn warm_start_reports() {
    let base = Model::<f32>::new(cfg(Arch::Baseline), 1).unwrap();
    let mut other = Model::<f32>::new(cfg(Arch::Baseline), 2).unwrap();
    let r = warm_start(&mut other, &base).unwrap();
    assert!(r.fresh.is_empty());
    assert_eq!(r.copied.len(), base.params().len());
    for (id, _, t) in base.params().iter() {
        assert_eq!(t.data(), other.params().get(id).data());
    }

    let mut ext = Model::<f32>::new(cfg(Arch::Mention), 2).unwrap();
    let fresh_before = ext.params().by_name("mention.attn.q_proj.weight").unwrap().clone();
    let r = warm_start(&mut ext, &base).unwrap();
    assert_eq!(r.fresh, mention_param_names(ext.config()));
    assert_eq!(r.copied.len(), base.params().len());
    assert_eq!(
        ext.params().by_name("mention.attn.q_proj.weight").unwrap(),
        &fresh_before
    );

    // extended into baseline drops the mention arrays
    let mut back = Model::<f32>::new(cfg(Arch::Baseline), 5).unwrap();
    let r = warm_start(&mut back, &ext).unwrap();
    assert_eq!(r.ignored, mention_param_names(ext.config()));
}

#[test]
fn warm_start_rejects_mismatches() {
    let base = Model::<f32>::new(cfg(Arch::Baseline), 1).unwrap();
    let mut wide = cfg(Arch::Mention);
    wide.d_model = 32;
    wide.d_ffn = 64;
    let mut ext = Model::<f32>::new(wide, 1).unwrap();
    assert!(matches!(warm_start(&mut ext, &base), Err(Error::Incompatible(_))));

    // same config, one shared array reshaped behind the config's back
    let mut ext = Model::<f32>::new(cfg(Arch::Mention), 1).unwrap();
    let mut bad = base.clone();
    let id = bad.params().id("decoder.layers.0.ffn.fc1.bias").unwrap();
    *bad.params_mut().get_mut(id) = Tensor::zeros(vec![7]);
    match warm_start(&mut ext, &bad) {
        Err(Error::Incompatible(msg)) => assert!(msg.contains("decoder.layers.0.ffn.fc1.bias")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn gate_off_forward_matches_baseline_after_warm_start() {
    let base = Model::<f32>::new(cfg(Arch::Baseline), 1).unwrap();
    let mut ext = Model::<f32>::new(cfg(Arch::Mention), 9).unwrap();
    warm_start(&mut ext, &base).unwrap();
    let data = corpus(8, 4, true);
    let refs: Vec<&Example> = data.iter().collect();
    let batch = Batch::from_examples(&refs).unwrap();
    let a = base.log_probs(&batch, &MaskMode::Off).unwrap();
    let b = ext.log_probs(&batch, &MaskMode::Off).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-5));
}

#[test]
fn dev_perplexity_is_exp_mean_cross_entropy() {
    let model = Model::<f64>::new(cfg(Arch::Baseline), 1).unwrap();
    let data = corpus(7, 5, false);
    let batches = build_batches(&data, &token_batches(&data, 30).unwrap()).unwrap();
    let ppl = dev_perplexity(&model, &batches).unwrap();
    let mut nll = 0.0;
    let mut n = 0.0;
    for e in &data {
        let b = Batch::from_examples(&[e]).unwrap();
        let lp = model.log_probs(&b, &MaskMode::Off).unwrap();
        for (t, &y) in b.tgt.output.iter().enumerate() {
            nll -= lp.data()[t * 24 + y];
            n += 1.0;
        }
    }
    assert!((ppl - (nll / n).exp()).abs() < 1e-9 * ppl);
}

#[test]
fn train_loop_selects_best_and_is_reproducible() {
    let train_set = corpus(60, 6, true);
    let dev_set = corpus(10, 7, true);
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        max_epochs: 3,
        ..tcfg()
    };
    let out = OutputSpec {
        dir: dir.path(),
        src_vocab: None,
        tgt_vocab: None,
        bpe: None,
    };
    let a = train(Model::<f32>::new(cfg(Arch::Mention), 1).unwrap(), &train_set, &dev_set, &c, Some(&out)).unwrap();
    let b = train(Model::<f32>::new(cfg(Arch::Mention), 1).unwrap(), &train_set, &dev_set, &c, None).unwrap();
    assert_eq!(a.records.len(), 3);
    let min = a
        .records
        .iter()
        .map(|r| r.dev_perplexity)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_record.dev_perplexity, min);
    for (id, name, t) in a.best.params().iter() {
        assert_eq!(t.data(), b.best.params().get(id).data(), "{name}");
    }
    assert_eq!(a.log, b.log);
    let lines = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let parsed: Vec<StepLog> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed.len(), a.steps);
    assert!(lines.lines().next().unwrap().contains("\"L_src\""));
    let saved = mention_nmt::model::load_model::<f32>(&dir.path().join("best")).unwrap();
    for (id, _, t) in a.best.params().iter() {
        assert_eq!(t.data(), saved.params().get(id).data());
    }
}
