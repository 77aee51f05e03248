//! Parameter inventory and seeded initialization.
//!
//! Every array draws from its own ChaCha stream keyed by `(seed, name)`, so
//! an array's initial value does not depend on which other arrays exist.
//! Fresh mention arrays at warm start therefore match a from-scratch model
//! built with the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Arch, ModelConfig};
use crate::error::Result;
use crate::tensor::{Float, ParamStore, Tensor};
use crate::text::vocab::PAD;

/// Name prefix shared by every mention-extension array.
pub const MENTION_PREFIX: &str = "mention.";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    XavierUniform,
    /// Normal(0, std) with the PAD row zeroed.
    Embedding { std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear(out: &mut Vec<ParamSpec>, name: &str, d_in: usize, d_out: usize) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![d_in, d_out],
        init: Init::XavierUniform,
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![d_out],
        init: Init::Zeros,
    });
}

fn layer_norm(out: &mut Vec<ParamSpec>, name: &str, d: usize) {
    out.push(ParamSpec {
        name: format!("{name}.gamma"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{name}.beta"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn attention(out: &mut Vec<ParamSpec>, name: &str, d: usize) {
    for p in ["q_proj", "k_proj", "v_proj", "out_proj"] {
        linear(out, &format!("{name}.{p}"), d, d);
    }
}

fn ffn(out: &mut Vec<ParamSpec>, name: &str, d: usize, hidden: usize, d_out: usize) {
    linear(out, &format!("{name}.fc1"), d, hidden);
    linear(out, &format!("{name}.fc2"), hidden, d_out);
}

/// Every array of a model, in checkpoint order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    let std = (d as f64).powf(-0.5);
    out.push(ParamSpec {
        name: "src_embed.weight".into(),
        shape: vec![cfg.src_vocab, d],
        init: Init::Embedding { std },
    });
    out.push(ParamSpec {
        name: "tgt_embed.weight".into(),
        shape: vec![cfg.tgt_vocab, d],
        init: Init::Embedding { std },
    });
    for i in 0..cfg.enc_layers {
        let p = format!("encoder.layers.{i}");
        attention(&mut out, &format!("{p}.self_attn"), d);
        layer_norm(&mut out, &format!("{p}.self_attn_ln"), d);
        ffn(&mut out, &format!("{p}.ffn"), d, cfg.d_ffn, d);
        layer_norm(&mut out, &format!("{p}.ffn_ln"), d);
    }
    for i in 0..cfg.dec_layers {
        let p = format!("decoder.layers.{i}");
        attention(&mut out, &format!("{p}.self_attn"), d);
        layer_norm(&mut out, &format!("{p}.self_attn_ln"), d);
        attention(&mut out, &format!("{p}.cross_attn"), d);
        layer_norm(&mut out, &format!("{p}.cross_attn_ln"), d);
        ffn(&mut out, &format!("{p}.ffn"), d, cfg.d_ffn, d);
        layer_norm(&mut out, &format!("{p}.ffn_ln"), d);
    }
    if cfg.arch == Arch::Mention {
        attention(&mut out, "mention.attn", d);
        layer_norm(&mut out, "mention.attn_ln", d);
        ffn(&mut out, "mention.ffn", d, cfg.d_ffn, d);
        layer_norm(&mut out, "mention.ffn_ln", d);
        ffn(&mut out, "mention.src_cls", d, cfg.cls_hidden, 1);
        ffn(&mut out, "mention.tgt_cls", d, cfg.cls_hidden, 1);
    }
    out
}

/// Names of the mention-extension arrays for `cfg` (empty for baseline).
pub fn mention_param_names(cfg: &ModelConfig) -> Vec<String> {
    param_specs(cfg)
        .into_iter()
        .filter(|s| s.name.starts_with(MENTION_PREFIX))
        .map(|s| s.name)
        .collect()
}

fn stream_id(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn init_tensor<T: Float>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(&spec.name));
    let n: usize = spec.shape.iter().product();
    let data: Vec<f64> = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::XavierUniform => {
            let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        }
        Init::Embedding { std } => {
            let dist = Normal::new(0.0, std).expect("positive std");
            let width = spec.shape[1];
            let mut v: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            v[PAD * width..(PAD + 1) * width].fill(0.0);
            v
        }
    };
    Tensor::from_f64(spec.shape.clone(), &data).expect("spec shape matches data")
}

pub fn init_params<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let t = init_tensor(&spec, seed);
        store.insert(spec.name, t)?;
    }
    Ok(store)
}
