use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Baseline,
    Mention,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Baseline => "baseline",
            Arch::Mention => "mention",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape and regularization of an encoder-decoder model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub label_smoothing: f64,
    /// Hidden width of the two mention classifiers.
    pub cls_hidden: usize,
    /// Reserved: a mention block in every decoder layer. Only `false` is
    /// implemented.
    #[serde(default)]
    pub mention_per_layer: bool,
}

impl ModelConfig {
    /// Full-size encoder-decoder: 6+6 layers, 512 wide, 8 heads.
    pub fn base(arch: Arch, src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            arch,
            enc_layers: 6,
            dec_layers: 6,
            d_model: 512,
            d_ffn: 2048,
            heads: 8,
            dropout: 0.1,
            src_vocab,
            tgt_vocab,
            label_smoothing: 0.1,
            cls_hidden: 512,
            mention_per_layer: false,
        }
    }

    /// Desk-scale preset: 2+2 layers, 64 wide, 4 heads.
    pub fn tiny(arch: Arch, src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            d_ffn: 128,
            heads: 4,
            cls_hidden: 64,
            ..Self::base(arch, src_vocab, tgt_vocab)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("model config: {m}")));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("at least one encoder and one decoder layer required".into());
        }
        if self.d_ffn == 0 || self.cls_hidden == 0 {
            return bad("zero-width feed-forward layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if self.src_vocab <= crate::text::vocab::UNK || self.tgt_vocab <= crate::text::vocab::UNK {
            return bad("vocabulary smaller than the reserved symbols".into());
        }
        if self.mention_per_layer {
            return bad("per-layer mention attention is not implemented".into());
        }
        Ok(())
    }

    /// Whether two configs can share every array they have in common.
    pub fn compatible_with(&self, other: &ModelConfig) -> Result<()> {
        let pairs = [
            ("enc_layers", self.enc_layers, other.enc_layers),
            ("dec_layers", self.dec_layers, other.dec_layers),
            ("d_model", self.d_model, other.d_model),
            ("d_ffn", self.d_ffn, other.d_ffn),
            ("heads", self.heads, other.heads),
            ("src_vocab", self.src_vocab, other.src_vocab),
            ("tgt_vocab", self.tgt_vocab, other.tgt_vocab),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::Incompatible(format!("{name}: {a} vs {b}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::base(Arch::Baseline, 100, 100).validate().unwrap();
        let t = ModelConfig::tiny(Arch::Mention, 100, 100);
        t.validate().unwrap();
        assert_eq!((t.d_model, t.enc_layers, t.dec_layers, t.heads, t.d_ffn), (64, 2, 2, 4, 128));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::tiny(Arch::Baseline, 100, 100);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(Arch::Mention, 100, 100);
        c.mention_per_layer = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::tiny(Arch::Mention, 50, 60);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"arch\":\"mention\""));
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
