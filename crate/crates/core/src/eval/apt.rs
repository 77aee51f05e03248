//! Accuracy of pronoun translation over word alignments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ambiguous subset tracked separately.
pub const AMBIGUOUS: [&str; 2] = ["it", "they"];

/// Default tracked English pronouns.
pub const DEFAULT_TRACKED: [&str; 8] = ["it", "they", "he", "she", "them", "him", "her", "its"];

/// One sentence's `(src, tgt)` index pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alignment(pub Vec<(usize, usize)>);

impl Alignment {
    /// Parses `"0-0 1-2 ..."`.
    pub fn parse(line: &str) -> Result<Self> {
        line.split_whitespace()
            .map(|p| {
                let (a, b) = p
                    .split_once('-')
                    .ok_or_else(|| Error::Alignment(format!("bad pair {p:?}")))?;
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Alignment(format!("bad index in {p:?}")))
                };
                Ok((parse(a)?, parse(b)?))
            })
            .collect::<Result<_>>()
            .map(Alignment)
    }

    pub fn identity(n: usize) -> Self {
        Alignment((0..n).map(|i| (i, i)).collect())
    }

    pub fn targets_of(&self, src: usize) -> Vec<usize> {
        self.0.iter().filter(|p| p.0 == src).map(|p| p.1).collect()
    }
}

impl std::fmt::Display for Alignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        f.write_str(&parts.join(" "))
    }
}

pub fn read_alignments(path: &Path) -> Result<Vec<Alignment>> {
    crate::text::read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Alignment::parse(l).map_err(|e| Error::Alignment(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_alignments(path: &Path, aligns: &[Alignment]) -> Result<()> {
    let lines: Vec<String> = aligns.iter().map(|a| a.to_string()).collect();
    crate::text::write_lines(path, &lines)
}

/// Reference form → acceptable candidate forms (all lowercase).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon(HashMap<String, BTreeSet<String>>);

impl Lexicon {
    pub fn from_map(map: HashMap<String, Vec<String>>) -> Self {
        Lexicon(
            map.into_iter()
                .map(|(k, v)| (k.to_lowercase(), v.into_iter().map(|s| s.to_lowercase()).collect()))
                .collect(),
        )
    }

    /// Reads a JSON object of `ref_form: [candidate forms]`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(Self::from_map(serde_json::from_str(&text)?))
    }

    fn equivalent(&self, reference: &str, cand: &str) -> bool {
        self.0.get(reference).is_some_and(|s| s.contains(cand))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AptCounts {
    pub identical: usize,
    pub different: usize,
    pub missing: usize,
}

impl AptCounts {
    pub fn total(&self) -> usize {
        self.identical + self.different + self.missing
    }

    /// `None` when nothing was tracked.
    pub fn score(&self) -> Option<f64> {
        match self.total() {
            0 => None,
            n => Some(self.identical as f64 / n as f64),
        }
    }

    fn add(&mut self, c: AptClass) {
        match c {
            AptClass::Identical => self.identical += 1,
            AptClass::Different => self.different += 1,
            AptClass::Missing => self.missing += 1,
        }
    }

    fn merge(&mut self, o: &AptCounts) {
        self.identical += o.identical;
        self.different += o.different;
        self.missing += o.missing;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AptClass {
    Identical,
    Different,
    Missing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AptReport {
    pub per_pronoun: BTreeMap<String, AptCounts>,
    pub all: AptCounts,
    pub ambiguous: AptCounts,
    /// `None` (serialized as null) when `all.total() == 0`.
    pub apt: Option<f64>,
    pub apt_ambiguous: Option<f64>,
    pub undefined: bool,
    pub undefined_ambiguous: bool,
    /// Occurrences whose candidate alignment had more than one word; these
    /// count as identical if any aligned word matches.
    pub multi_aligned: usize,
}

/// Sentence-aligned APT inputs. All corpora are tokenized.
pub struct AptInput<'a> {
    pub src: &'a [Vec<String>],
    pub cand: &'a [Vec<String>],
    pub refs: &'a [Vec<String>],
    pub align_ref: &'a [Alignment],
    pub align_cand: &'a [Alignment],
}

fn aligned_words<'s>(
    a: &Alignment,
    i: usize,
    tgt: &'s [String],
    what: &str,
    line: usize,
) -> Result<Vec<String>> {
    a.targets_of(i)
        .into_iter()
        .map(|j| {
            tgt.get(j).map(|w| w.to_lowercase()).ok_or_else(|| {
                Error::Alignment(format!(
                    "line {}: {what} index {j} out of range ({} words)",
                    line + 1,
                    tgt.len()
                ))
            })
        })
        .collect()
}

/// Classifies one pronoun occurrence.
pub fn classify(ref_words: &[String], cand_words: &[String], lexicon: Option<&Lexicon>) -> AptClass {
    if cand_words.is_empty() {
        return AptClass::Missing;
    }
    let hit = cand_words.iter().any(|c| {
        ref_words
            .iter()
            .any(|r| r == c || lexicon.is_some_and(|lx| lx.equivalent(r, c)))
    });
    if hit {
        AptClass::Identical
    } else {
        AptClass::Different
    }
}

pub fn apt<S: AsRef<str>>(input: &AptInput<'_>, tracked: &[S], lexicon: Option<&Lexicon>) -> Result<AptReport> {
    let n = input.src.len();
    for (what, len) in [
        ("candidate", input.cand.len()),
        ("reference", input.refs.len()),
        ("reference alignment", input.align_ref.len()),
        ("candidate alignment", input.align_cand.len()),
    ] {
        if len != n {
            return Err(Error::Alignment(format!(
                "{n} source lines but {len} {what} lines"
            )));
        }
    }
    let tracked: BTreeSet<String> = tracked.iter().map(|s| s.as_ref().to_lowercase()).collect();
    let mut per_pronoun: BTreeMap<String, AptCounts> = BTreeMap::new();
    let mut multi_aligned = 0;
    for line in 0..n {
        for (i, w) in input.src[line].iter().enumerate() {
            let w = w.to_lowercase();
            if !tracked.contains(&w) {
                continue;
            }
            let r = aligned_words(&input.align_ref[line], i, &input.refs[line], "reference", line)?;
            let c = aligned_words(&input.align_cand[line], i, &input.cand[line], "candidate", line)?;
            if c.len() > 1 {
                multi_aligned += 1;
            }
            per_pronoun.entry(w).or_default().add(classify(&r, &c, lexicon));
        }
    }
    let mut all = AptCounts::default();
    let mut ambiguous = AptCounts::default();
    for (p, c) in &per_pronoun {
        all.merge(c);
        if AMBIGUOUS.contains(&p.as_str()) {
            ambiguous.merge(c);
        }
    }
    Ok(AptReport {
        apt: all.score(),
        apt_ambiguous: ambiguous.score(),
        undefined: all.total() == 0,
        undefined_ambiguous: ambiguous.total() == 0,
        per_pronoun,
        all,
        ambiguous,
        multi_aligned,
    })
}
