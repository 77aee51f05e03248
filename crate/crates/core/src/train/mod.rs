//! Optimization: scheduled Adam over token-capped batches with
//! best-dev-perplexity model selection.

pub mod adam;
pub mod batching;
pub mod grad_check;
pub mod schedule;
pub mod warm_start;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use batching::{build_batches, epoch_order, token_batches};
pub use schedule::lr_schedule;
pub use warm_start::{warm_start, WarmStartReport};

use crate::error::{Error, Result};
use crate::mention::{joint_loss, LossValues, LossWeights};
use crate::model::{save_checkpoint, Batch, Checkpoint, Example, MaskMode, Model};
use crate::tensor::{lit, DType, Float, Graph};
use crate::text::{BpeModel, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    /// Cap on padded source+target tokens per batch.
    pub token_batch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub precision: DType,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-4,
            warmup_steps: 4000,
            max_epochs: 20,
            token_batch_size: 4096,
            loss_weights: LossWeights::default(),
            seed: 1,
            precision: DType::F32,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults to go with the tiny model preset.
    pub fn tiny() -> Self {
        TrainConfig {
            lr0: 1e-3,
            warmup_steps: 200,
            max_epochs: 6,
            token_batch_size: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.max_epochs == 0 || self.token_batch_size == 0 {
            return Err(Error::Contract(
                "lr0, max_epochs and token_batch_size must be positive".into(),
            ));
        }
        let w = &self.loss_weights;
        if w.mt < 0.0 || w.src < 0.0 || w.tgt < 0.0 {
            return Err(Error::Contract("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_mt")]
    pub l_mt: f64,
    #[serde(rename = "L_src")]
    pub l_src: f64,
    #[serde(rename = "L_tgt")]
    pub l_tgt: f64,
    pub total: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub step: usize,
    pub dev_perplexity: f64,
    pub path: Option<PathBuf>,
}

/// Optimizer and step counter carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub adam: Adam<T>,
    pub step: usize,
}

impl<T: Float> TrainState<T> {
    pub fn new(model: &Model<T>, cfg: &TrainConfig) -> Self {
        TrainState {
            adam: Adam::new(cfg.adam, model.params()),
            step: 0,
        }
    }
}

fn mask_mode<T: Float>(model: &Model<T>) -> MaskMode {
    if model.is_mention() {
        MaskMode::Gold
    } else {
        MaskMode::Off
    }
}

fn dropout_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64)
}

/// Forward, joint loss, backward and one Adam update on `batch`.
pub fn train_step<T: Float>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    batch: &Batch,
    batch_id: usize,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<StepLog> {
    let step = state.step + 1;
    let nan = |detail: String| Error::NanLoss {
        step,
        batch: batch_id,
        detail,
    };
    let lr = lr_schedule(step, cfg.lr0, cfg.warmup_steps)?;
    let (values, grads) = {
        let mut g = Graph::with_params(model.params()).training(dropout_seed(cfg.seed, step));
        let f = model
            .forward(&mut g, batch, &mask_mode(model))
            .map_err(|e| match e {
                Error::NonFinite { op } => nan(format!("non-finite output of {op}")),
                e => e,
            })?;
        let loss = joint_loss(
            &mut g,
            f.decoded.log_probs,
            &batch.src,
            &batch.tgt,
            f.encoded.src_cls.as_ref(),
            f.decoded.tgt_cls.as_ref(),
            &cfg.loss_weights,
            model.config().label_smoothing,
        )
        .map_err(|e| match e {
            Error::NonFinite { op } => nan(format!("non-finite {op}")),
            e => e,
        })?;
        let values = loss.values(&g);
        if !values.total.is_finite() {
            return Err(nan(format!("{values:?}")));
        }
        let grads = g.backward(loss.total)?.into_param_grads(model.params().len());
        (values, grads)
    };
    state.adam.step(model.params_mut(), &grads, lr)?;
    state.step = step;
    Ok(StepLog {
        step,
        epoch,
        lr,
        l_mt: values.mt,
        l_src: values.src,
        l_tgt: values.tgt,
        total: values.total,
        tokens: batch.tgt.num_tokens(),
    })
}

/// One pass over `batches` in the seeded order for `epoch`.
pub fn train_epoch<T: Float>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    batches: &[Batch],
    epoch: usize,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<LossValues> {
    let mut sum = LossValues::default();
    let mut n = 0.0;
    for bi in epoch_order(batches.len(), cfg.seed, epoch) {
        let log = train_step(model, state, &batches[bi], bi, epoch, cfg)?;
        on_step(&log)?;
        sum.mt += log.l_mt;
        sum.src += log.l_src;
        sum.tgt += log.l_tgt;
        sum.total += log.total;
        n += 1.0;
    }
    if n > 0.0 {
        sum.mt /= n;
        sum.src /= n;
        sum.tgt /= n;
        sum.total /= n;
    }
    Ok(sum)
}

/// `exp` of the mean per-token cross-entropy, without label smoothing or
/// dropout. The mention model uses gold masks when tags are present.
pub fn dev_perplexity<T: Float>(model: &Model<T>, batches: &[Batch]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for batch in batches {
        let mode = if model.is_mention() && batch.src.tags.is_some() {
            MaskMode::Gold
        } else {
            MaskMode::Predicted { threshold: 0.5 }
        };
        let mut g = model.graph();
        let f = model.forward(&mut g, batch, &mode)?;
        let n = batch.tgt.num_tokens();
        let w: Vec<T> = batch
            .tgt
            .pad
            .iter()
            .map(|&p| if p { T::zero() } else { T::one() })
            .collect();
        let l = g.nll_loss(f.decoded.log_probs, &batch.tgt.output, &w, 0.0, lit(1.0))?;
        nll += g.value(l).data()[0].to_f64_lossy();
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Input("empty development set".into()));
    }
    Ok((nll / tokens as f64).exp())
}

/// Where and with what preprocessing to store the selected checkpoint.
pub struct OutputSpec<'a> {
    pub dir: &'a Path,
    pub src_vocab: Option<&'a Vocab>,
    pub tgt_vocab: Option<&'a Vocab>,
    pub bpe: Option<&'a BpeModel>,
}

pub const BEST_DIR: &str = "best";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RECORDS_FILE: &str = "checkpoints.json";

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Float> {
    /// Parameters of the epoch with the lowest dev perplexity.
    pub best: Model<T>,
    pub best_record: CheckpointRecord,
    pub records: Vec<CheckpointRecord>,
    pub steps: usize,
    pub log: Vec<StepLog>,
}

/// Trains for `max_epochs`, evaluating dev perplexity after each epoch and
/// keeping the best model.
pub fn train<T: Float>(
    mut model: Model<T>,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
    output: Option<&OutputSpec<'_>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let groups = token_batches(train_set, cfg.token_batch_size)?;
    let batches = build_batches(train_set, &groups)?;
    let dev_batches = build_batches(dev_set, &token_batches(dev_set, cfg.token_batch_size)?)?;
    let mut log_file = match output {
        Some(o) => {
            std::fs::create_dir_all(o.dir)
                .map_err(|e| Error::io(format!("creating {}", o.dir.display()), e))?;
            let p = o.dir.join(LOG_FILE);
            Some(std::io::BufWriter::new(
                std::fs::File::create(&p)
                    .map_err(|e| Error::io(format!("creating {}", p.display()), e))?,
            ))
        }
        None => None,
    };
    let mut state = TrainState::new(&model, cfg);
    let mut log = Vec::new();
    let mut records: Vec<CheckpointRecord> = Vec::new();
    let mut best: Option<(Model<T>, CheckpointRecord)> = None;
    for epoch in 1..=cfg.max_epochs {
        let mean = train_epoch(&mut model, &mut state, &batches, epoch, cfg, &mut |s| {
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, s)?;
                writeln!(f)?;
            }
            log.push(s.clone());
            Ok(())
        })?;
        let ppl = if dev_batches.is_empty() {
            mean.mt.exp()
        } else {
            dev_perplexity(&model, &dev_batches)?
        };
        log::info!(
            "epoch {epoch}: step {} train loss {:.4} (mt {:.4}) dev ppl {:.3}",
            state.step,
            mean.total,
            mean.mt,
            ppl
        );
        let mut rec = CheckpointRecord {
            epoch,
            step: state.step,
            dev_perplexity: ppl,
            path: None,
        };
        let improved = best.as_ref().is_none_or(|(_, b)| ppl < b.dev_perplexity);
        if improved {
            if let Some(o) = output {
                let dir = o.dir.join(BEST_DIR);
                save_checkpoint(
                    &dir,
                    &Checkpoint {
                        model: model.clone(),
                        src_vocab: o.src_vocab.cloned(),
                        tgt_vocab: o.tgt_vocab.cloned(),
                        bpe: o.bpe.cloned(),
                    },
                )?;
                rec.path = Some(dir);
            }
            best = Some((model.clone(), rec.clone()));
        }
        records.push(rec);
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(o) = output {
        let p = o.dir.join(RECORDS_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&records)?)
            .map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    let (best, best_record) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_record,
        records,
        steps: state.step,
        log,
    })
}
