//! Finite-difference check of the full joint loss on a small random batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mention::{joint_loss, LossWeights};
use crate::model::{mention_param_names, Arch, Batch, Example, MaskMode, Model, ModelConfig};
use crate::tensor::gradcheck::{check_params, Probe};
use crate::tensor::{Graph, ParamId, ParamStore};
use crate::text::MentionTag;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub arch: Arch,
    pub seed: u64,
    /// Probes drawn across all arrays, on top of one per mention array.
    pub random_probes: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            arch: Arch::Mention,
            seed: 1,
            random_probes: 24,
            eps: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub arch: Arch,
    pub seed: u64,
    pub loss: f64,
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

const VOCAB: usize = 16;

fn random_batch(rng: &mut ChaCha8Rng) -> Result<Batch> {
    let examples: Vec<Example> = (0..3)
        .map(|_| {
            let sent = |rng: &mut ChaCha8Rng| -> (Vec<usize>, Vec<MentionTag>) {
                let n = rng.random_range(3..=7);
                let ids = (0..n).map(|_| rng.random_range(4..VOCAB)).collect();
                // at least one mention so every row takes the attention path
                let tags = (0..n)
                    .map(|i| if i == 0 || rng.random_bool(0.4) { MentionTag::Mention } else { MentionTag::None })
                    .collect();
                (ids, tags)
            };
            let (src, st) = sent(rng);
            let (tgt, tt) = sent(rng);
            Example { src, tgt, src_tags: Some(st), tgt_tags: Some(tt) }
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::from_examples(&refs)
}

fn loss_and_grads(
    model: &Model<f64>,
    store: &ParamStore<f64>,
    batch: &Batch,
    grads: bool,
) -> Result<(f64, Option<crate::tensor::ParamGrads<f64>>)> {
    let mode = if model.is_mention() { MaskMode::Gold } else { MaskMode::Off };
    let mut g = Graph::with_params(store);
    let f = model.forward(&mut g, batch, &mode)?;
    let loss = joint_loss(
        &mut g,
        f.decoded.log_probs,
        &batch.src,
        &batch.tgt,
        f.encoded.src_cls.as_ref(),
        f.decoded.tgt_cls.as_ref(),
        &LossWeights::default(),
        model.config().label_smoothing,
    )?;
    let value = loss.values(&g).total;
    let grads = if grads {
        Some(g.backward(loss.total)?.into_param_grads(store.len()))
    } else {
        None
    };
    Ok((value, grads))
}

/// Picks an index with a non-negligible analytic gradient where one exists;
/// entries with zero gradient (e.g. unused embedding rows) test nothing.
fn pick_index(grad: Option<&[f64]>, len: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut best = (rng.random_range(0..len), 0.0f64);
    for _ in 0..32 {
        let i = rng.random_range(0..len);
        let a = grad.map_or(0.0, |g| g[i].abs());
        if a >= 1e-5 {
            return i;
        }
        if a > best.1 {
            best = (i, a);
        }
    }
    best.0
}

/// Runs the check on the tiny preset (vocabulary 16, dropout off) in f64.
pub fn grad_check_model(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mcfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::tiny(cfg.arch, VOCAB, VOCAB)
    };
    let model = Model::<f64>::new(mcfg.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let batch = random_batch(&mut rng)?;
    let mut store = model.params().clone();
    let (loss, grads) = loss_and_grads(&model, &store, &batch, true)?;
    let grads = grads.expect("requested");

    let mut probes: Vec<(ParamId, usize)> = Vec::new();
    if cfg.arch == Arch::Mention {
        for name in mention_param_names(&mcfg) {
            let id = store.id(&name)?;
            probes.push((id, pick_index(grads.get(id), store.get(id).data().len(), &mut rng)));
        }
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for _ in 0..cfg.random_probes {
        let id = ids[rng.random_range(0..ids.len())];
        probes.push((id, pick_index(grads.get(id), store.get(id).data().len(), &mut rng)));
    }
    if probes.is_empty() {
        return Err(Error::Contract("no probes requested".into()));
    }
    let results = check_params(&mut store, &grads, &probes, cfg.eps, |s| {
        Ok(loss_and_grads(&model, s, &batch, false)?.0)
    })?;
    let max_rel_err = results.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        arch: cfg.arch,
        seed: cfg.seed,
        loss,
        probes: results,
        max_rel_err,
        tolerance: cfg.tolerance,
        passed: max_rel_err < cfg.tolerance,
    })
}
