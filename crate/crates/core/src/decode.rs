//! Beam search and teacher-forced scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mention::MentionMask;
use crate::model::{Batch, Checkpoint, EncoderStates, Example, MaskMode, Model, SourceBatch, TargetBatch};
use crate::tensor::{Float, Graph, Tensor};
use crate::text::vocab::{BOS, EOS, PAD, UNK};
use crate::text::{detokenize, tokenize, MentionTag, Vocab};

/// Source of the mention mask at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Predicted,
    Gold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Maximum output length including EOS; EOS is forced at the last step.
    /// The effective limit is also capped at `2·|src| + 10`.
    pub max_len: usize,
    /// Exponent of the length penalty `((5 + |y|) / 6)^alpha`.
    pub alpha: f64,
    pub mask: MaskSource,
    pub threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 4,
            max_len: 100,
            alpha: 0.6,
            mask: MaskSource::Predicted,
            threshold: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn mask_mode(&self) -> MaskMode {
        match self.mask {
            MaskSource::Predicted => MaskMode::Predicted {
                threshold: self.threshold,
            },
            MaskSource::Gold => MaskMode::Gold,
        }
    }
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    /// Output ids without EOS.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities including EOS.
    pub log_prob: f64,
    /// `log_prob` divided by the length penalty.
    pub score: f64,
    /// EOS was forced because `max_len` ran out.
    pub hit_max_len: bool,
    /// Mention mask over source positions (EOS included), if the model has
    /// one.
    pub mask: Option<Vec<bool>>,
    pub mask_source: Option<MaskSource>,
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
}

fn is_forbidden(v: usize) -> bool {
    v == PAD || v == BOS || v == UNK
}

/// Repeats each row of `x [B, ...]` `times` times.
fn repeat_rows<T: Float>(x: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
    let b = x.shape()[0];
    let row = x.numel() / b.max(1);
    let mut data = Vec::with_capacity(x.numel() * times);
    for r in x.data().chunks(row.max(1)) {
        for _ in 0..times {
            data.extend_from_slice(r);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = b * times;
    Tensor::new(shape, data)
}

/// Source side encoded once and reused for every decoding step.
struct EncodedSource<T: Float> {
    hidden: Tensor<T>,
    pad: Vec<bool>,
    len: usize,
    mask: Option<MentionMask>,
}

fn encode_once<T: Float>(
    model: &Model<T>,
    src: &[usize],
    tags: Option<&[MentionTag]>,
    mode: &MaskMode,
) -> Result<EncodedSource<T>> {
    let tag_rows = tags.map(|t| [t]);
    let sb = SourceBatch::new(&[src], tag_rows.as_ref().map(|r| &r[..]))?;
    let mut g = model.graph();
    let enc = model.encode_source(&mut g, &sb, mode)?;
    Ok(EncodedSource {
        hidden: g.value(enc.states.hidden).clone(),
        pad: sb.pad,
        len: sb.len,
        mask: enc.mask,
    })
}

/// Next-token log-probabilities for each prefix (all of equal length).
fn step_log_probs<T: Float>(
    model: &Model<T>,
    enc: &EncodedSource<T>,
    prefixes: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let k = prefixes.len();
    let mut g = model.graph();
    let states = EncoderStates {
        hidden: g.input(repeat_rows(&enc.hidden, k)?),
        pad: enc.pad.repeat(k),
        batch: k,
        len: enc.len,
    };
    let encoded = crate::model::Encoded {
        states,
        src_cls: None,
        mask: enc.mask.as_ref().map(|m| m.repeat_rows(k)),
    };
    let rows: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
    let tb = TargetBatch::prefixes(&rows)?;
    let dec = model.decode(&mut g, &tb, &encoded)?;
    let lp = g.value(dec.log_probs);
    let v = lp.last_dim();
    let t = tb.len;
    Ok((0..k)
        .map(|b| {
            lp.data()[(b * t + t - 1) * v..(b * t + t) * v]
                .iter()
                .map(|x| x.to_f64_lossy())
                .collect()
        })
        .collect())
}

/// Beam search; `beam == 1` is greedy decoding.
pub fn translate<T: Float>(
    model: &Model<T>,
    src: &[usize],
    tags: Option<&[MentionTag]>,
    cfg: &DecodeConfig,
) -> Result<Translation> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::Contract("beam and max_len must be positive".into()));
    }
    if cfg.mask == MaskSource::Gold && model.is_mention() && tags.is_none() {
        return Err(Error::Contract("gold-mask decoding needs source tags".into()));
    }
    let enc = encode_once(model, src, tags, &cfg.mask_mode())?;
    let k = cfg.beam;
    let max_len = cfg.max_len.min(2 * src.len() + 10);
    let norm = |h: &Hyp| h.log_prob / length_penalty(h.tokens.len() + 1, cfg.alpha);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<(Hyp, bool)> = Vec::new();
    for step in 1..=max_len {
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let lps = step_log_probs(model, &enc, &prefixes)?;
        let last = step == max_len;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, (h, lp)) in live.iter().zip(&lps).enumerate() {
            for (v, &l) in lp.iter().enumerate() {
                if is_forbidden(v) || (last && v != EOS) {
                    continue;
                }
                cands.push((h.log_prob + l, hi, v));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(k);
        // Greedy decoding follows the argmax alone; wider beams also finish
        // any EOS among the top 2k expansions.
        let width = if k == 1 { 1 } else { 2 * k };
        for (lp, hi, v) in cands.into_iter().take(width) {
            let mut tokens = live[hi].tokens.clone();
            if v == EOS {
                finished.push((
                    Hyp {
                        tokens,
                        log_prob: lp,
                    },
                    last,
                ));
            } else if next.len() < k {
                tokens.push(v);
                next.push(Hyp {
                    tokens,
                    log_prob: lp,
                });
            }
        }
        // Log-probabilities only fall as hypotheses grow, so a live
        // hypothesis can at best reach log_prob / lp(max_len).
        let best_done = finished
            .iter()
            .map(|(h, _)| norm(h))
            .fold(f64::NEG_INFINITY, f64::max);
        let bound = next
            .iter()
            .map(|h| h.log_prob / length_penalty(max_len, cfg.alpha))
            .fold(f64::NEG_INFINITY, f64::max);
        if next.is_empty() || best_done >= bound {
            break;
        }
        live = next;
    }
    let mut best: Option<(Hyp, bool)> = None;
    for cand in finished {
        if best.as_ref().is_none_or(|b| norm(&cand.0) > norm(&b.0)) {
            best = Some(cand);
        }
    }
    let (best, forced) =
        best.ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))?;
    if forced {
        log::warn!("translation hit max_len {max_len}; EOS forced");
    }
    Ok(Translation {
        score: norm(&best),
        log_prob: best.log_prob,
        tokens: best.tokens,
        hit_max_len: forced,
        mask: enc.mask.map(|m| m.keep),
        mask_source: model.is_mention().then_some(cfg.mask),
    })
}

/// Translates many sentences in parallel; output order matches input.
pub fn translate_all<T: Float>(
    model: &Model<T>,
    sources: &[(Vec<usize>, Option<Vec<MentionTag>>)],
    cfg: &DecodeConfig,
) -> Result<Vec<Translation>> {
    sources
        .par_iter()
        .map(|(s, t)| translate(model, s, t.as_deref(), cfg))
        .collect()
}

/// `Σ_t log P(y_t | y_<t, x)` over `tgt` followed by EOS.
pub fn score_sequence<T: Float>(
    model: &Model<T>,
    src: &[usize],
    tgt: &[usize],
    mode: &MaskMode,
) -> Result<f64> {
    Ok(score_batch(model, &[Example::untagged(src.to_vec(), tgt.to_vec())], mode)?[0])
}

/// Scores several pairs in one padded batch.
pub fn score_batch<T: Float>(model: &Model<T>, pairs: &[Example], mode: &MaskMode) -> Result<Vec<f64>> {
    Ok(token_log_probs(model, pairs, mode)?
        .into_iter()
        .map(|t| t.iter().sum())
        .collect())
}

/// Per-token log-probabilities (EOS last) for each pair, teacher-forced in
/// one padded batch.
pub fn token_log_probs<T: Float>(
    model: &Model<T>,
    pairs: &[Example],
    mode: &MaskMode,
) -> Result<Vec<Vec<f64>>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&Example> = pairs.iter().collect();
    let batch = Batch::from_examples(&refs)?;
    let mut g: Graph<'_, T> = model.graph();
    let f = model.forward(&mut g, &batch, mode)?;
    let lp = g.value(f.decoded.log_probs);
    let v = lp.last_dim();
    let t = batch.tgt.len;
    Ok((0..batch.tgt.size)
        .map(|b| {
            (0..t)
                .filter(|&i| !batch.tgt.pad[b * t + i])
                .map(|i| lp.data()[(b * t + i) * v + batch.tgt.output[b * t + i]].to_f64_lossy())
                .collect()
        })
        .collect())
}

/// Encodes a tokenized sentence, warning about out-of-vocabulary subwords.
pub fn encode_text(ckpt_vocab: &Vocab, subwords: &[String], side: &str) -> Vec<usize> {
    let ids = ckpt_vocab.encode(subwords);
    let oov = ids.iter().filter(|&&i| i == UNK).count();
    if oov > 0 {
        log::warn!("{oov} out-of-vocabulary {side} subwords mapped to <unk>");
    }
    ids
}

/// Text-level helpers bound to a checkpoint's preprocessing.
impl<T: Float> Checkpoint<T> {
    fn require(&self) -> Result<(&crate::text::BpeModel, &Vocab, &Vocab)> {
        match (&self.bpe, &self.src_vocab, &self.tgt_vocab) {
            (Some(b), Some(s), Some(t)) => Ok((b, s, t)),
            _ => Err(Error::Input(
                "checkpoint lacks BPE merges or vocabularies".into(),
            )),
        }
    }

    /// Segments and encodes a whitespace-tokenized source line, propagating
    /// optional word-level tags to subwords.
    pub fn encode_source(&self, line: &str, word_tags: Option<&[MentionTag]>) -> Result<(Vec<usize>, Option<Vec<MentionTag>>)> {
        let (bpe, sv, _) = self.require()?;
        let s = crate::text::prepare_sentence(&tokenize(line), word_tags, bpe, sv)?;
        let oov = s.ids.iter().filter(|&&i| i == UNK).count();
        if oov > 0 {
            log::warn!("{oov} out-of-vocabulary source subwords mapped to <unk>");
        }
        Ok((s.ids, s.tags))
    }

    pub fn encode_target(&self, line: &str) -> Result<Vec<usize>> {
        let (bpe, _, tv) = self.require()?;
        let seg = bpe.apply(&tokenize(line));
        Ok(encode_text(tv, &seg.subwords, "target"))
    }

    pub fn decode_target(&self, ids: &[usize]) -> Result<String> {
        let (_, _, tv) = self.require()?;
        Ok(detokenize(ids, tv).join(" "))
    }

    pub fn translate_line(
        &self,
        line: &str,
        word_tags: Option<&[MentionTag]>,
        cfg: &DecodeConfig,
    ) -> Result<(String, Translation)> {
        let (ids, tags) = self.encode_source(line, word_tags)?;
        let tr = translate(&self.model, &ids, tags.as_deref(), cfg)?;
        Ok((self.decode_target(&tr.tokens)?, tr))
    }

    pub fn score_line(&self, src: &str, tgt: &str, mode: &MaskMode) -> Result<f64> {
        let (s, tags) = self.encode_source(src, None)?;
        debug_assert!(tags.is_none());
        let t = self.encode_target(tgt)?;
        score_sequence(&self.model, &s, &t, mode)
    }
}
