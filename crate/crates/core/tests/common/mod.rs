//! Naive reference implementations used as oracles by several test files.
//! Everything here is plain loops over `Vec<f64>`, sharing no code with the
//! engine beyond reading parameter values by name.
#![allow(dead_code)]

use mention_nmt::model::{Model, ModelConfig};

pub struct Ref<'a> {
    pub model: &'a Model<f64>,
}

pub type Mat = Vec<Vec<f64>>;

impl<'a> Ref<'a> {
    pub fn p(&self, name: &str) -> (Vec<usize>, Vec<f64>) {
        let t = self.model.params().by_name(name).unwrap();
        (t.shape().to_vec(), t.data().to_vec())
    }

    pub fn cfg(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn linear(&self, prefix: &str, x: &Mat) -> Mat {
        let (s, w) = self.p(&format!("{prefix}.weight"));
        let (_, b) = self.p(&format!("{prefix}.bias"));
        x.iter()
            .map(|row| {
                (0..s[1])
                    .map(|j| b[j] + (0..s[0]).map(|i| row[i] * w[i * s[1] + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn ln(&self, prefix: &str, x: &Mat) -> Mat {
        let (_, g) = self.p(&format!("{prefix}.gamma"));
        let (_, b) = self.p(&format!("{prefix}.beta"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                let r = 1.0 / (var + 1e-5).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mu) * r * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    pub fn ffn(&self, prefix: &str, x: &Mat) -> Mat {
        let h = self.linear(&format!("{prefix}.fc1"), x);
        let h: Mat = h
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        self.linear(&format!("{prefix}.fc2"), &h)
    }

    /// Returns (output, per-head probabilities [h][q][k]).
    pub fn attention(&self, prefix: &str, q_in: &Mat, kv: &Mat, keep: &dyn Fn(usize, usize) -> bool) -> (Mat, Vec<Mat>) {
        let heads = self.cfg().heads;
        let d = q_in[0].len();
        let dk = d / heads;
        let q = self.linear(&format!("{prefix}.q_proj"), q_in);
        let k = self.linear(&format!("{prefix}.k_proj"), kv);
        let v = self.linear(&format!("{prefix}.v_proj"), kv);
        let mut ctx = vec![vec![0.0; d]; q.len()];
        let mut all = Vec::new();
        for h in 0..heads {
            let mut probs = Vec::new();
            for i in 0..q.len() {
                let scores: Vec<Option<f64>> = (0..k.len())
                    .map(|j| {
                        keep(i, j).then(|| {
                            (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>()
                                / (dk as f64).sqrt()
                        })
                    })
                    .collect();
                let mx = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().flatten().map(|s| (s - mx).exp()).sum();
                let p: Vec<f64> = scores
                    .iter()
                    .map(|s| s.map(|s| (s - mx).exp() / z).unwrap_or(0.0))
                    .collect();
                for c in 0..dk {
                    ctx[i][h * dk + c] = (0..k.len()).map(|j| p[j] * v[j][h * dk + c]).sum();
                }
                probs.push(p);
            }
            all.push(probs);
        }
        (self.linear(&format!("{prefix}.out_proj"), &ctx), all)
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    pub fn embed(&self, table: &str, ids: &[usize]) -> Mat {
        let (s, w) = self.p(table);
        let d = s[1];
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|c| {
                        let i = c - c % 2;
                        let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
                        let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                        w[id * d + c] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    /// Encoder for one unpadded sentence (ids already include EOS).
    pub fn encode(&self, ids: &[usize]) -> Mat {
        let mut x = self.embed("src_embed.weight", ids);
        for l in 0..self.cfg().enc_layers {
            let p = format!("encoder.layers.{l}");
            let (a, _) = self.attention(&format!("{p}.self_attn"), &x, &x, &|_, _| true);
            x = self.ln(&format!("{p}.self_attn_ln"), &Self::add(&x, &a));
            let f = self.ffn(&format!("{p}.ffn"), &x);
            x = self.ln(&format!("{p}.ffn_ln"), &Self::add(&x, &f));
        }
        x
    }

    /// Decoder FFN output for one target input sequence (starting with BOS).
    pub fn decode(&self, input: &[usize], enc: &Mat) -> Mat {
        let mut x = self.embed("tgt_embed.weight", input);
        for l in 0..self.cfg().dec_layers {
            let p = format!("decoder.layers.{l}");
            let (a, _) = self.attention(&format!("{p}.self_attn"), &x, &x, &|i, j| j <= i);
            x = self.ln(&format!("{p}.self_attn_ln"), &Self::add(&x, &a));
            let (a, _) = self.attention(&format!("{p}.cross_attn"), &x, enc, &|_, _| true);
            x = self.ln(&format!("{p}.cross_attn_ln"), &Self::add(&x, &a));
            let f = self.ffn(&format!("{p}.ffn"), &x);
            x = self.ln(&format!("{p}.ffn_ln"), &Self::add(&x, &f));
        }
        x
    }

    /// Log-softmax over tied output logits for each row.
    pub fn log_probs(&self, h: &Mat) -> Mat {
        let (s, e) = self.p("tgt_embed.weight");
        h.iter()
            .map(|row| {
                let logits: Vec<f64> = (0..s[0])
                    .map(|v| (0..s[1]).map(|c| row[c] * e[v * s[1] + c]).sum())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
                logits.iter().map(|l| l - lse).collect()
            })
            .collect()
    }

    /// Sum of log P(y_t | y_<t, x) for `tgt` followed by EOS.
    pub fn score(&self, src: &[usize], tgt: &[usize]) -> f64 {
        let mut s = src.to_vec();
        s.push(2);
        let enc = self.encode(&s);
        let mut input = vec![1];
        input.extend_from_slice(tgt);
        let mut out = tgt.to_vec();
        out.push(2);
        let lp = self.log_probs(&self.decode(&input, &enc));
        out.iter().enumerate().map(|(t, &y)| lp[t][y]).sum()
    }
}

/// Rows of a `[B, L, d]` tensor for batch item `b`, first `n` positions.
pub fn rows(data: &[f64], shape: &[usize], b: usize, n: usize) -> Mat {
    let (l, d) = (shape[1], shape[2]);
    (0..n)
        .map(|i| data[(b * l + i) * d..(b * l + i + 1) * d].to_vec())
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

impl<'a> Ref<'a> {
    pub fn classifier(&self, prefix: &str, h: &Mat) -> Vec<f64> {
        self.ffn(prefix, h)
            .iter()
            .map(|r| 1.0 / (1.0 + (-r[0]).exp()))
            .collect()
    }

    /// Mention block for one sentence; `mask` covers encoder positions.
    pub fn mention_block(&self, h_ffn: &Mat, enc: &Mat, mask: &[bool]) -> Mat {
        if !mask.iter().any(|&m| m) {
            return h_ffn.clone();
        }
        let (a, _) = self.attention("mention.attn", h_ffn, enc, &|_, j| mask[j]);
        let x = self.ln("mention.attn_ln", &Self::add(h_ffn, &a));
        let f = self.ffn("mention.ffn", &x);
        self.ln("mention.ffn_ln", &Self::add(&x, &f))
    }

    /// Full extended-model log-probabilities for one pair with a given mask
    /// (mask length = src.len() + 1 for EOS).
    pub fn mention_log_probs(&self, src: &[usize], tgt_in: &[usize], mask: &[bool]) -> Mat {
        let mut s = src.to_vec();
        s.push(2);
        let enc = self.encode(&s);
        let h = self.decode(tgt_in, &enc);
        self.log_probs(&self.mention_block(&h, &enc, mask))
    }
}
