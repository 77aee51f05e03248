//! Subword segmentation, mention tags and vocabularies.

pub mod bpe;
pub mod tags;
pub mod vocab;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub use bpe::{reconstruct, BpeModel, Segmentation, WordBoundaries};
pub use tags::{map_pos_to_mention, propagate_tags, MentionTag};
pub use vocab::Vocab;

use crate::error::{Error, Result};

/// Subword ids with one mention tag per subword.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSentence {
    pub ids: Vec<usize>,
    /// `None` for untagged input (e.g. at inference time).
    pub tags: Option<Vec<MentionTag>>,
    pub boundaries: WordBoundaries,
}

impl TaggedSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Segments, tags and encodes one tokenized sentence.
pub fn prepare_sentence<S: AsRef<str>>(
    tokens: &[S],
    word_tags: Option<&[MentionTag]>,
    bpe: &BpeModel,
    vocab: &Vocab,
) -> Result<TaggedSentence> {
    let seg = bpe.apply(tokens);
    sentence_from_segmentation(&seg, word_tags, vocab)
}

pub fn sentence_from_segmentation(
    seg: &Segmentation,
    word_tags: Option<&[MentionTag]>,
    vocab: &Vocab,
) -> Result<TaggedSentence> {
    let tags = match word_tags {
        Some(t) => Some(propagate_tags(t, &seg.boundaries)?),
        None => None,
    };
    Ok(TaggedSentence {
        ids: vocab.encode(&seg.subwords),
        tags,
        boundaries: seg.boundaries.clone(),
    })
}

/// Turns decoded subword ids back into words.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    reconstruct(&vocab.decode(ids))
}

/// Whitespace tokenization.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(BufReader::new(f).lines().collect::<std::io::Result<Vec<_>>>()?)
}

pub fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(f);
    for l in lines {
        writeln!(w, "{}", l.as_ref())?;
    }
    w.flush()?;
    Ok(())
}
