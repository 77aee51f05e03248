//! Padded batches of source/target id sequences.

use crate::error::{Error, Result};
use crate::text::vocab::{BOS, EOS, PAD};
use crate::text::MentionTag;

/// Padded source side. EOS is appended to every sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub size: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    /// `true` at padding positions, `[size, len]`.
    pub pad: Vec<bool>,
    /// Per-row tags over the non-pad positions (EOS tagged `None`).
    pub tags: Option<Vec<Vec<MentionTag>>>,
}

/// Padded target side for teacher forcing: `input = BOS + y`,
/// `output = y + EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub size: usize,
    pub len: usize,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub pad: Vec<bool>,
    /// Tags aligned with `output` (EOS tagged `None`).
    pub tags: Option<Vec<Vec<MentionTag>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: SourceBatch,
    pub tgt: TargetBatch,
}

/// One training or scoring pair before padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub src_tags: Option<Vec<MentionTag>>,
    pub tgt_tags: Option<Vec<MentionTag>>,
}

impl Example {
    pub fn untagged(src: Vec<usize>, tgt: Vec<usize>) -> Self {
        Example {
            src,
            tgt,
            src_tags: None,
            tgt_tags: None,
        }
    }

    /// Tokens this pair contributes to a batch (with EOS/BOS added).
    pub fn num_tokens(&self) -> usize {
        self.src.len() + self.tgt.len() + 2
    }
}

fn check_tags(kind: &str, ids: &[usize], tags: Option<&Vec<MentionTag>>) -> Result<()> {
    if let Some(t) = tags {
        if t.len() != ids.len() {
            return Err(Error::Alignment(format!(
                "{kind}: {} tags for {} subwords",
                t.len(),
                ids.len()
            )));
        }
    }
    Ok(())
}

fn with_eos_tag(tags: &[MentionTag]) -> Vec<MentionTag> {
    let mut t = tags.to_vec();
    t.push(MentionTag::None);
    t
}

impl SourceBatch {
    pub fn new(sentences: &[&[usize]], tags: Option<&[&[MentionTag]]>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if let Some(t) = tags {
            if t.len() != sentences.len() {
                return Err(Error::Alignment("tag rows do not match batch size".into()));
            }
            for (s, t) in sentences.iter().zip(t) {
                check_tags("source", s, Some(&t.to_vec()))?;
            }
        }
        let size = sentences.len();
        let len = sentences.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut ids = vec![PAD; size * len];
        let mut pad = vec![true; size * len];
        for (b, s) in sentences.iter().enumerate() {
            let row = &mut ids[b * len..(b + 1) * len];
            row[..s.len()].copy_from_slice(s);
            row[s.len()] = EOS;
            pad[b * len..b * len + s.len() + 1].fill(false);
        }
        Ok(SourceBatch {
            size,
            len,
            ids,
            pad,
            tags: tags.map(|t| t.iter().map(|r| with_eos_tag(r)).collect()),
        })
    }

    /// Length of row `b` including EOS.
    pub fn row_len(&self, b: usize) -> usize {
        self.pad[b * self.len..(b + 1) * self.len]
            .iter()
            .filter(|&&p| !p)
            .count()
    }

    pub fn num_tokens(&self) -> usize {
        self.pad.iter().filter(|&&p| !p).count()
    }

    /// Gold tags padded to `[size, len]` as booleans.
    pub fn padded_tags(&self) -> Option<Vec<bool>> {
        padded(self.tags.as_ref()?, self.size, self.len)
    }
}

fn padded(tags: &[Vec<MentionTag>], size: usize, len: usize) -> Option<Vec<bool>> {
    let mut out = vec![false; size * len];
    for (b, row) in tags.iter().enumerate() {
        for (j, t) in row.iter().enumerate() {
            out[b * len + j] = t.is_mention();
        }
    }
    Some(out)
}

impl TargetBatch {
    pub fn new(sentences: &[&[usize]], tags: Option<&[&[MentionTag]]>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if let Some(t) = tags {
            if t.len() != sentences.len() {
                return Err(Error::Alignment("tag rows do not match batch size".into()));
            }
            for (s, t) in sentences.iter().zip(t) {
                check_tags("target", s, Some(&t.to_vec()))?;
            }
        }
        let size = sentences.len();
        let len = sentences.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut input = vec![PAD; size * len];
        let mut output = vec![PAD; size * len];
        let mut pad = vec![true; size * len];
        for (b, s) in sentences.iter().enumerate() {
            let o = b * len;
            input[o] = BOS;
            input[o + 1..o + 1 + s.len()].copy_from_slice(s);
            output[o..o + s.len()].copy_from_slice(s);
            output[o + s.len()] = EOS;
            pad[o..o + s.len() + 1].fill(false);
        }
        Ok(TargetBatch {
            size,
            len,
            input,
            output,
            pad,
            tags: tags.map(|t| t.iter().map(|r| with_eos_tag(r)).collect()),
        })
    }

    /// Decoder inputs only (no gold outputs), e.g. beam prefixes starting
    /// with BOS. All rows must have the same length.
    pub fn prefixes(rows: &[&[usize]]) -> Result<Self> {
        let len = rows.first().map(|r| r.len()).unwrap_or(0);
        if len == 0 || rows.iter().any(|r| r.len() != len) {
            return Err(Error::dim("prefixes", "rows must be non-empty and equal length"));
        }
        Ok(TargetBatch {
            size: rows.len(),
            len,
            input: rows.concat(),
            output: vec![PAD; rows.len() * len],
            pad: vec![false; rows.len() * len],
            tags: None,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.pad.iter().filter(|&&p| !p).count()
    }

    pub fn padded_tags(&self) -> Option<Vec<bool>> {
        padded(self.tags.as_ref()?, self.size, self.len)
    }
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        let srcs: Vec<&[usize]> = examples.iter().map(|e| e.src.as_slice()).collect();
        let tgts: Vec<&[usize]> = examples.iter().map(|e| e.tgt.as_slice()).collect();
        let src_tags: Option<Vec<&[MentionTag]>> =
            examples.iter().map(|e| e.src_tags.as_deref()).collect();
        let tgt_tags: Option<Vec<&[MentionTag]>> =
            examples.iter().map(|e| e.tgt_tags.as_deref()).collect();
        Ok(Batch {
            src: SourceBatch::new(&srcs, src_tags.as_deref())?,
            tgt: TargetBatch::new(&tgts, tgt_tags.as_deref())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use MentionTag::{Mention as M, None as N};

    #[test]
    fn layout() {
        let a = Example {
            src: vec![10, 11],
            tgt: vec![20],
            src_tags: Some(vec![M, N]),
            tgt_tags: Some(vec![M]),
        };
        let b = Example {
            src: vec![12],
            tgt: vec![21, 22, 23],
            src_tags: Some(vec![N]),
            tgt_tags: Some(vec![N, M, N]),
        };
        let batch = Batch::from_examples(&[&a, &b]).unwrap();
        assert_eq!(batch.src.len, 3);
        assert_eq!(batch.src.ids, vec![10, 11, EOS, 12, EOS, PAD]);
        assert_eq!(batch.src.pad, vec![false, false, false, false, false, true]);
        assert_eq!(
            batch.src.padded_tags().unwrap(),
            vec![true, false, false, false, false, false]
        );
        assert_eq!(batch.tgt.len, 4);
        assert_eq!(batch.tgt.input, vec![BOS, 20, PAD, PAD, BOS, 21, 22, 23]);
        assert_eq!(batch.tgt.output, vec![20, EOS, PAD, PAD, 21, 22, 23, EOS]);
        assert_eq!(
            batch.tgt.padded_tags().unwrap(),
            vec![true, false, false, false, false, true, false, false]
        );
        assert_eq!(batch.src.row_len(1), 2);
    }

    #[test]
    fn tag_mismatch_is_alignment_error() {
        let a = Example {
            src: vec![10, 11],
            tgt: vec![20],
            src_tags: Some(vec![M]),
            tgt_tags: None,
        };
        assert!(matches!(Batch::from_examples(&[&a]), Err(Error::Alignment(_))));
    }

    #[test]
    fn partial_tags_drop_to_none() {
        let a = Example::untagged(vec![4], vec![5]);
        let mut b = a.clone();
        b.src_tags = Some(vec![M]);
        let batch = Batch::from_examples(&[&a, &b]).unwrap();
        assert!(batch.src.tags.is_none());
    }
}
