//! Mention tags: POS-to-mention mapping, subword propagation, tag files.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bpe::WordBoundaries;
use crate::error::{Error, Result};

/// Universal POS categories treated as mentions.
pub const MENTION_POS: [&str; 5] = ["NOUN", "PRON", "PROPN", "SYM", "NUM"];

/// The universal POS inventory (plus spaCy's `SPACE`).
pub const UNIVERSAL_POS: [&str; 18] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN",
    "PUNCT", "SCONJ", "SYM", "VERB", "X", "SPACE",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MentionTag {
    Mention,
    None,
}

impl MentionTag {
    pub fn is_mention(self) -> bool {
        self == MentionTag::Mention
    }

    /// Maps a single universal POS tag. Unknown tags log a warning and map to
    /// `None`.
    pub fn from_pos(pos: &str) -> MentionTag {
        if MENTION_POS.contains(&pos) {
            MentionTag::Mention
        } else {
            if !UNIVERSAL_POS.contains(&pos) {
                log::warn!("unknown POS tag {pos:?}; treating as non-mention");
            }
            MentionTag::None
        }
    }

    /// Accepts either a serialized mention tag or a POS tag.
    pub fn from_tag_or_pos(s: &str) -> MentionTag {
        s.parse().unwrap_or_else(|_| MentionTag::from_pos(s))
    }
}

impl fmt::Display for MentionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MentionTag::Mention => "mention",
            MentionTag::None => "none",
        })
    }
}

impl FromStr for MentionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mention" => Ok(MentionTag::Mention),
            "none" => Ok(MentionTag::None),
            other => Err(Error::Input(format!("not a mention tag: {other:?}"))),
        }
    }
}

pub fn map_pos_to_mention<S: AsRef<str>>(pos_tags: &[S]) -> Vec<MentionTag> {
    pos_tags
        .iter()
        .map(|p| MentionTag::from_pos(p.as_ref()))
        .collect()
}

/// Copies each word's tag onto all of its subwords.
pub fn propagate_tags(word_tags: &[MentionTag], boundaries: &WordBoundaries) -> Result<Vec<MentionTag>> {
    if word_tags.len() != boundaries.num_words() {
        return Err(Error::Alignment(format!(
            "{} word tags for {} words",
            word_tags.len(),
            boundaries.num_words()
        )));
    }
    Ok(word_tags
        .iter()
        .zip(&boundaries.0)
        .flat_map(|(&t, &n)| std::iter::repeat_n(t, n))
        .collect())
}

/// One sentence of a tag file: `(token, tag)` rows.
pub type TaggedRows = Vec<(String, String)>;

/// Reads `token<TAB>tag` rows, with a blank line between sentences.
pub fn read_tag_file(path: &Path) -> Result<Vec<TaggedRows>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            sentences.push(std::mem::take(&mut current));
            continue;
        }
        let (tok, tag) = line.split_once('\t').ok_or_else(|| {
            Error::Input(format!(
                "{}:{}: expected token<TAB>tag",
                path.display(),
                n + 1
            ))
        })?;
        current.push((tok.to_string(), tag.to_string()));
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(sentences)
}

pub fn write_tag_file<A: AsRef<str>, B: AsRef<str>>(
    path: &Path,
    sentences: &[Vec<(A, B)>],
) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(f);
    for sent in sentences {
        for (tok, tag) in sent {
            writeln!(w, "{}\t{}", tok.as_ref(), tag.as_ref())?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Checks a tag file against tokenized corpus lines and returns the
/// per-word mention tags.
pub fn align_tags_with_corpus(
    rows: &[TaggedRows],
    corpus: &[Vec<String>],
) -> Result<Vec<Vec<MentionTag>>> {
    if rows.len() != corpus.len() {
        return Err(Error::Alignment(format!(
            "tag file has {} sentences, corpus has {}",
            rows.len(),
            corpus.len()
        )));
    }
    rows.iter()
        .zip(corpus)
        .enumerate()
        .map(|(i, (r, toks))| {
            if r.len() != toks.len() || r.iter().zip(toks).any(|((a, _), b)| a != b) {
                return Err(Error::Alignment(format!(
                    "sentence {}: tag rows do not match corpus tokens",
                    i + 1
                )));
            }
            Ok(r.iter().map(|(_, t)| MentionTag::from_tag_or_pos(t)).collect())
        })
        .collect()
}
