//! Mention attention, mention classifiers, mask construction and the joint
//! objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::batch::{SourceBatch, TargetBatch};
use crate::model::layers::{feed_forward, key_mask, multi_head_attention, residual_norm, Attention};
use crate::model::{EncoderStates, ModelConfig};
use crate::tensor::{lit, EmptyRows, Float, Graph, Mask, Var};
use crate::text::MentionTag;

/// Binary mask over source positions, `[batch, len]`; `true` marks a mention
/// subword. Padding is always `false`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionMask {
    pub batch: usize,
    pub len: usize,
    pub keep: Vec<bool>,
}

impl MentionMask {
    pub fn new(batch: usize, len: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * len {
            return Err(Error::dim(
                "mention mask",
                format!("{} entries for [{batch}, {len}]", keep.len()),
            ));
        }
        Ok(MentionMask { batch, len, keep })
    }

    pub fn zeros(batch: usize, len: usize) -> Self {
        MentionMask {
            batch,
            len,
            keep: vec![false; batch * len],
        }
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.keep[b * self.len..(b + 1) * self.len]
    }

    pub fn row_has_mention(&self, b: usize) -> bool {
        self.row(b).iter().any(|&k| k)
    }

    /// 1 for rows with at least one mention, 0 for gate-off rows.
    pub fn gates(&self) -> Vec<f64> {
        (0..self.batch)
            .map(|b| if self.row_has_mention(b) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Broadcastable attention mask `[batch, 1, 1, len]`.
    pub fn attention_mask(&self) -> Mask {
        Mask::new(vec![self.batch, 1, 1, self.len], self.keep.clone())
            .expect("mask shape is consistent")
    }

    /// Repeats each row `times` times (row-major), e.g. once per beam.
    pub fn repeat_rows(&self, times: usize) -> Self {
        let mut keep = Vec::with_capacity(self.keep.len() * times);
        for b in 0..self.batch {
            for _ in 0..times {
                keep.extend_from_slice(self.row(b));
            }
        }
        MentionMask {
            batch: self.batch * times,
            len: self.len,
            keep,
        }
    }
}

/// `mask[b, j] = tag is mention ∧ ¬pad`. Each tag row must cover exactly the
/// non-pad prefix of its batch row.
pub fn build_mask_from_tags(
    tags: &[Vec<MentionTag>],
    pad: &[bool],
    batch: usize,
    len: usize,
) -> Result<MentionMask> {
    if tags.len() != batch || pad.len() != batch * len {
        return Err(Error::Alignment(format!(
            "{} tag rows / {} pad entries for batch [{batch}, {len}]",
            tags.len(),
            pad.len()
        )));
    }
    let mut keep = vec![false; batch * len];
    for (b, row) in tags.iter().enumerate() {
        let prow = &pad[b * len..(b + 1) * len];
        let real = prow.iter().filter(|&&p| !p).count();
        if row.len() != real {
            return Err(Error::Alignment(format!(
                "row {b}: {} tags for {real} positions",
                row.len()
            )));
        }
        for (j, t) in row.iter().enumerate() {
            keep[b * len + j] = t.is_mention() && !prow[j];
        }
    }
    MentionMask::new(batch, len, keep)
}

/// `(p ≥ threshold) ∧ ¬pad`.
pub fn predict_mask(
    probs: &[f64],
    pad: &[bool],
    batch: usize,
    len: usize,
    threshold: f64,
) -> Result<MentionMask> {
    if probs.len() != batch * len || pad.len() != batch * len {
        return Err(Error::dim(
            "predict_mask",
            format!("{} probabilities for [{batch}, {len}]", probs.len()),
        ));
    }
    let keep = probs
        .iter()
        .zip(pad)
        .map(|(&p, &pd)| p >= threshold && !pd)
        .collect();
    MentionMask::new(batch, len, keep)
}

/// Per-position classifier output.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    /// Pre-sigmoid scores, `[batch, len]`.
    pub logits: Var,
    /// Mention probabilities, `[batch, len]`.
    pub probs: Var,
}

/// `sigmoid(fc2(relu(fc1(h))))` applied independently at every position.
pub fn classify_mentions<T: Float>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    h: Var,
) -> Result<ClassifierOutput> {
    let s = g.shape(h).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("classify_mentions", format!("{s:?}")));
    }
    let z = feed_forward(g, prefix, h)?;
    let logits = g.reshape(z, &[s[0], s[1]])?;
    let probs = g.sigmoid(logits)?;
    Ok(ClassifierOutput { logits, probs })
}

#[derive(Clone, Copy, Debug)]
pub struct MentionBlock {
    /// Hidden states handed to the output layer.
    pub out: Var,
    /// The mention attention itself (before the zero gate).
    pub attention: Attention,
    /// Gated attention sublayer output: zero for rows without mentions.
    pub sublayer: Var,
}

/// Mention attention over encoder states restricted to `mask`, followed by
/// residual + layer norm and a second FFN with residual + layer norm.
///
/// Rows whose mask is empty take the gate-off path: the attention sublayer
/// contributes zero and the block output for that row is `h_ffn` itself.
pub fn mention_attention<T: Float>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    h_ffn: Var,
    enc: &EncoderStates,
    mask: &MentionMask,
) -> Result<MentionBlock> {
    if mask.batch != enc.batch || mask.len != enc.len {
        return Err(Error::Alignment(format!(
            "mention mask [{}, {}] vs encoder [{}, {}]",
            mask.batch, mask.len, enc.batch, enc.len
        )));
    }
    if mask.keep.iter().zip(&enc.pad).any(|(&k, &p)| k && p) {
        return Err(Error::Alignment("mention mask marks a padding position".into()));
    }
    let attention = multi_head_attention(
        g,
        "mention.attn",
        h_ffn,
        enc.hidden,
        cfg.heads,
        &mask.attention_mask(),
        EmptyRows::Zero,
    )?;
    let gates = mask.gates();
    let all_on = gates.iter().all(|&x| x == 1.0);
    let sublayer = if all_on {
        attention.out
    } else {
        g.scale_rows(attention.out, gates.iter().map(|&x| lit(x)).collect())?
    };
    let x = residual_norm(g, "mention.attn_ln", h_ffn, sublayer, cfg.dropout)?;
    let f = feed_forward(g, "mention.ffn", x)?;
    let y = residual_norm(g, "mention.ffn_ln", x, f, cfg.dropout)?;
    let out = if all_on {
        y
    } else {
        let on = g.scale_rows(y, gates.iter().map(|&x| lit(x)).collect())?;
        let off = g.scale_rows(h_ffn, gates.iter().map(|&x| lit(1.0 - x)).collect())?;
        g.add(on, off)?
    };
    Ok(MentionBlock {
        out,
        attention,
        sublayer,
    })
}

/// Relative weights of the translation and the two classifier losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mt: f64,
    pub src: f64,
    pub tgt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mt: 1.0,
            src: 0.1,
            tgt: 0.1,
        }
    }
}

impl LossWeights {
    pub fn translation_only() -> Self {
        LossWeights {
            mt: 1.0,
            src: 0.0,
            tgt: 0.0,
        }
    }

    pub fn combine(&self, mt: f64, src: f64, tgt: f64) -> f64 {
        self.mt * mt + self.src * src + self.tgt * tgt
    }
}

#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub mt: Var,
    pub src: Option<Var>,
    pub tgt: Option<Var>,
}

/// Plain values of a [`JointLoss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub mt: f64,
    pub src: f64,
    pub tgt: f64,
}

impl JointLoss {
    pub fn values<T: Float>(&self, g: &Graph<'_, T>) -> LossValues {
        let v = |x: Var| g.value(x).data()[0].to_f64_lossy();
        LossValues {
            total: v(self.total),
            mt: v(self.mt),
            src: self.src.map(v).unwrap_or(0.0),
            tgt: self.tgt.map(v).unwrap_or(0.0),
        }
    }
}

fn not_pad<T: Float>(pad: &[bool]) -> (Vec<T>, T) {
    let w: Vec<T> = pad
        .iter()
        .map(|&p| if p { T::zero() } else { T::one() })
        .collect();
    let n = pad.iter().filter(|&&p| !p).count().max(1);
    (w, lit(n as f64))
}

fn bce_term<T: Float>(
    g: &mut Graph<'_, T>,
    cls: &ClassifierOutput,
    gold: Option<Vec<bool>>,
    pad: &[bool],
    side: &str,
) -> Result<Var> {
    let gold = gold.ok_or_else(|| {
        Error::Contract(format!("{side} classifier loss needs gold {side} tags"))
    })?;
    let targets: Vec<T> = gold
        .iter()
        .map(|&m| if m { T::one() } else { T::zero() })
        .collect();
    let (w, n) = not_pad(pad);
    g.bce_with_logits(cls.logits, &targets, &w, n)
}

/// `mt·L_mt + src·L_src + tgt·L_tgt`, each term averaged over non-pad
/// positions. Classifier terms are skipped when their classifier is absent
/// or their weight is zero.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Float>(
    g: &mut Graph<'_, T>,
    log_probs: Var,
    src: &SourceBatch,
    tgt: &TargetBatch,
    src_cls: Option<&ClassifierOutput>,
    tgt_cls: Option<&ClassifierOutput>,
    weights: &LossWeights,
    smoothing: f64,
) -> Result<JointLoss> {
    let (w, n) = not_pad::<T>(&tgt.pad);
    let mt = g.nll_loss(log_probs, &tgt.output, &w, smoothing, n)?;
    let mut total = if weights.mt == 1.0 {
        mt
    } else {
        g.scale(mt, lit(weights.mt))?
    };
    let mut add_term = |g: &mut Graph<'_, T>, term: Var, weight: f64| -> Result<()> {
        let s = g.scale(term, lit(weight))?;
        total = g.add(total, s)?;
        Ok(())
    };
    let src_term = match src_cls {
        Some(c) if weights.src != 0.0 => {
            let l = bce_term(g, c, src.padded_tags(), &src.pad, "source")?;
            add_term(g, l, weights.src)?;
            Some(l)
        }
        _ => None,
    };
    let tgt_term = match tgt_cls {
        Some(c) if weights.tgt != 0.0 => {
            let l = bce_term(g, c, tgt.padded_tags(), &tgt.pad, "target")?;
            add_term(g, l, weights.tgt)?;
            Some(l)
        }
        _ => None,
    };
    Ok(JointLoss {
        total,
        mt,
        src: src_term,
        tgt: tgt_term,
    })
}

/// Builds the key-padding mask used by a standard cross-attention over
/// `enc`; exposed so tests can compare against mention attention.
pub fn cross_attention_mask(enc: &EncoderStates) -> Result<Mask> {
    key_mask(&enc.pad, enc.batch, enc.len)
}
