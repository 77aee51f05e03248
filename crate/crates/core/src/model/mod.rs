//! Post-norm encoder-decoder with tied target embeddings and an optional
//! mention block on top of the decoder.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod init;
pub mod layers;

pub use batch::{Batch, Example, SourceBatch, TargetBatch};
pub use checkpoint::{load_checkpoint, load_model, read_manifest, save_checkpoint, Checkpoint, Manifest};
pub use config::{Arch, ModelConfig};
pub use init::{init_params, mention_param_names, param_specs, MENTION_PREFIX};

use crate::error::{Error, Result};
use crate::mention::{self, ClassifierOutput, MentionBlock, MentionMask};
use crate::tensor::{EmptyRows, Float, Graph, ParamStore, Tensor, Var};
use layers::{causal_mask, embed, feed_forward, key_mask, multi_head_attention, residual_norm};

/// Top encoder layer output plus the source padding layout.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    /// `[batch, len, d_model]`.
    pub hidden: Var,
    pub pad: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl EncoderStates {
    /// Copies the states onto another graph as a constant.
    pub fn transfer<T: Float>(&self, from: &Graph<'_, T>, to: &mut Graph<'_, T>) -> Self {
        EncoderStates {
            hidden: to.input(from.value(self.hidden).clone()),
            ..self.clone()
        }
    }
}

/// Where the mention mask comes from.
#[derive(Clone, Debug)]
pub enum MaskMode {
    /// Gold source tags carried by the batch.
    Gold,
    /// Thresholded source classifier output.
    Predicted { threshold: f64 },
    Given(MentionMask),
    /// All-zero mask: every row takes the gate-off path.
    Off,
}

/// Encoder output with the mention-side artifacts computed from it.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: EncoderStates,
    pub src_cls: Option<ClassifierOutput>,
    pub mask: Option<MentionMask>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Output of the last decoder layer's FFN sublayer.
    pub h_ffn: Var,
    /// Tensor fed to the output layer.
    pub hidden: Var,
    /// `[batch, len, tgt_vocab]`.
    pub log_probs: Var,
    pub tgt_cls: Option<ClassifierOutput>,
    pub mention: Option<MentionBlock>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: Encoded,
    pub decoded: Decoded,
}

#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Wraps existing arrays, checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} arrays, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .by_name(&spec.name)
                .map_err(|_| Error::Incompatible(format!("missing array {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn is_mention(&self) -> bool {
        self.config.arch == Arch::Mention
    }

    /// Evaluation-mode graph over this model's parameters.
    pub fn graph(&self) -> Graph<'_, T> {
        Graph::with_params(&self.params)
    }

    /// Converts every array to another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (_, name, t) in self.params.iter() {
            params.insert(name, t.cast()).expect("names are unique");
        }
        Model {
            config: self.config.clone(),
            params,
        }
    }

    pub fn encode(&self, g: &mut Graph<'_, T>, src: &SourceBatch) -> Result<EncoderStates> {
        let cfg = &self.config;
        let (b, l) = (src.size, src.len);
        let mut x = embed(g, "src_embed.weight", &src.ids, b, l, cfg)?;
        let mask = key_mask(&src.pad, b, l)?;
        for i in 0..cfg.enc_layers {
            let p = format!("encoder.layers.{i}");
            let att = multi_head_attention(
                g,
                &format!("{p}.self_attn"),
                x,
                x,
                cfg.heads,
                &mask,
                EmptyRows::Error,
            )?;
            x = residual_norm(g, &format!("{p}.self_attn_ln"), x, att.out, cfg.dropout)?;
            let f = feed_forward(g, &format!("{p}.ffn"), x)?;
            x = residual_norm(g, &format!("{p}.ffn_ln"), x, f, cfg.dropout)?;
        }
        Ok(EncoderStates {
            hidden: x,
            pad: src.pad.clone(),
            batch: b,
            len: l,
        })
    }

    /// Runs the decoder stack on teacher-forced inputs and returns the output
    /// of the final layer's FFN sublayer, `[batch, len, d_model]`.
    pub fn decode_step_base(
        &self,
        g: &mut Graph<'_, T>,
        tgt: &TargetBatch,
        enc: &EncoderStates,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (b, l) = (tgt.size, tgt.len);
        if b != enc.batch {
            return Err(Error::dim(
                "decode",
                format!("target batch {b} vs source batch {}", enc.batch),
            ));
        }
        let mut x = embed(g, "tgt_embed.weight", &tgt.input, b, l, cfg)?;
        let self_mask = causal_mask(&tgt.pad, b, l)?;
        let cross_mask = key_mask(&enc.pad, b, enc.len)?;
        for i in 0..cfg.dec_layers {
            let p = format!("decoder.layers.{i}");
            let att = multi_head_attention(
                g,
                &format!("{p}.self_attn"),
                x,
                x,
                cfg.heads,
                &self_mask,
                EmptyRows::Error,
            )?;
            x = residual_norm(g, &format!("{p}.self_attn_ln"), x, att.out, cfg.dropout)?;
            let att = multi_head_attention(
                g,
                &format!("{p}.cross_attn"),
                x,
                enc.hidden,
                cfg.heads,
                &cross_mask,
                EmptyRows::Error,
            )?;
            x = residual_norm(g, &format!("{p}.cross_attn_ln"), x, att.out, cfg.dropout)?;
            let f = feed_forward(g, &format!("{p}.ffn"), x)?;
            x = residual_norm(g, &format!("{p}.ffn_ln"), x, f, cfg.dropout)?;
        }
        Ok(x)
    }

    /// Tied output layer: `log_softmax(h · Eᵀ)`.
    pub fn project_output(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        let w = g.param_named("tgt_embed.weight")?;
        let logits = g.matmul_bt(h, w)?;
        g.log_softmax(logits)
    }

    /// Encodes the source and, for the mention architecture, runs the source
    /// classifier and resolves the mention mask.
    pub fn encode_source(
        &self,
        g: &mut Graph<'_, T>,
        src: &SourceBatch,
        mode: &MaskMode,
    ) -> Result<Encoded> {
        let states = self.encode(g, src)?;
        if !self.is_mention() {
            return Ok(Encoded {
                states,
                src_cls: None,
                mask: None,
            });
        }
        let cls = mention::classify_mentions(g, "mention.src_cls", states.hidden)?;
        let mask = match mode {
            MaskMode::Gold => {
                let tags = src.tags.as_ref().ok_or_else(|| {
                    Error::Contract("gold mask requested but source tags are missing".into())
                })?;
                mention::build_mask_from_tags(tags, &src.pad, src.size, src.len)?
            }
            MaskMode::Predicted { threshold } => {
                let probs = g.value(cls.probs).to_f64_vec();
                mention::predict_mask(&probs, &src.pad, src.size, src.len, *threshold)?
            }
            MaskMode::Given(m) => {
                if (m.batch, m.len) != (src.size, src.len) {
                    return Err(Error::Alignment(format!(
                        "mask [{}, {}] vs source [{}, {}]",
                        m.batch, m.len, src.size, src.len
                    )));
                }
                m.clone()
            }
            MaskMode::Off => MentionMask::zeros(src.size, src.len),
        };
        Ok(Encoded {
            states,
            src_cls: Some(cls),
            mask: Some(mask),
        })
    }

    /// Decoder, mention block (if any) and output layer.
    pub fn decode(
        &self,
        g: &mut Graph<'_, T>,
        tgt: &TargetBatch,
        enc: &Encoded,
    ) -> Result<Decoded> {
        let h_ffn = self.decode_step_base(g, tgt, &enc.states)?;
        let (hidden, tgt_cls, block) = match &enc.mask {
            Some(mask) if self.is_mention() => {
                let cls = mention::classify_mentions(g, "mention.tgt_cls", h_ffn)?;
                let block = mention::mention_attention(g, &self.config, h_ffn, &enc.states, mask)?;
                (block.out, Some(cls), Some(block))
            }
            _ => (h_ffn, None, None),
        };
        let log_probs = self.project_output(g, hidden)?;
        Ok(Decoded {
            h_ffn,
            hidden,
            log_probs,
            tgt_cls,
            mention: block,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        mode: &MaskMode,
    ) -> Result<Forward> {
        let encoded = self.encode_source(g, &batch.src, mode)?;
        let decoded = self.decode(g, &batch.tgt, &encoded)?;
        Ok(Forward { encoded, decoded })
    }

    /// Log-probabilities of a teacher-forced batch as a tensor.
    pub fn log_probs(&self, batch: &Batch, mode: &MaskMode) -> Result<Tensor<T>> {
        let mut g = self.graph();
        let f = self.forward(&mut g, batch, mode)?;
        Ok(g.value(f.decoded.log_probs).clone())
    }
}
