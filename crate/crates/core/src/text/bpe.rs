//! Byte-pair encoding in the subword-nmt convention.
//!
//! Words are split into characters with an end-of-word marker glued to the
//! final character (`"low"` → `l o w</w>`). Learned merges are applied in rank
//! order. Segmented output marks every non-final subword with a trailing
//! `@@`, so `"lowest"` may become `lowe@@ s@@ t`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const CONTINUATION: &str = "@@";

type Pair = (String, String);

/// Ordered merge table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, usize>,
}

/// Number of subwords belonging to each original word, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WordBoundaries(pub Vec<usize>);

impl WordBoundaries {
    /// Recovers the grouping from `@@` continuation markers.
    pub fn from_subwords<S: AsRef<str>>(subwords: &[S]) -> Self {
        let mut counts = Vec::new();
        let mut current = 0;
        for s in subwords {
            current += 1;
            if !s.as_ref().ends_with(CONTINUATION) {
                counts.push(current);
                current = 0;
            }
        }
        if current > 0 {
            counts.push(current);
        }
        WordBoundaries(counts)
    }

    pub fn num_words(&self) -> usize {
        self.0.len()
    }

    pub fn num_subwords(&self) -> usize {
        self.0.iter().sum()
    }

    /// Word index of every subword.
    pub fn word_of_subword(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(w, &n)| std::iter::repeat_n(w, n))
            .collect()
    }
}

/// A segmented sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub subwords: Vec<String>,
    pub boundaries: WordBoundaries,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate merge {} {}", m.0, m.1)));
            }
        }
        Ok(BpeModel { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Greedy merge learning. The most frequent adjacent pair is merged each
    /// round; ties go to the lexicographically smallest pair. Stops early when
    /// no pair remains.
    pub fn learn<'a>(tokens: impl IntoIterator<Item = &'a str>, num_merges: usize) -> Result<Self> {
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for t in tokens {
            if !t.is_empty() {
                *freq.entry(t).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::Input("cannot learn BPE from an empty corpus".into()));
        }
        let mut words: Vec<(Vec<String>, i64)> = freq
            .into_iter()
            .map(|(w, c)| (initial_symbols(w), c as i64))
            .collect();

        let mut counts: HashMap<Pair, i64> = HashMap::new();
        let mut where_: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
        for (i, (syms, c)) in words.iter().enumerate() {
            for p in syms.windows(2) {
                let pair = (p[0].clone(), p[1].clone());
                *counts.entry(pair.clone()).or_default() += c;
                where_.entry(pair).or_default().insert(i);
            }
        }

        let mut merges = Vec::with_capacity(num_merges);
        while merges.len() < num_merges {
            let best = counts
                .iter()
                .filter(|(_, &c)| c > 0)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|(p, _)| p.clone());
            let Some(best) = best else { break };
            let affected = where_.remove(&best).unwrap_or_default();
            for i in affected {
                let (syms, c) = &mut words[i];
                for p in syms.windows(2) {
                    let pair = (p[0].clone(), p[1].clone());
                    if let Some(x) = counts.get_mut(&pair) {
                        *x -= *c;
                    }
                }
                *syms = merge_pair(syms, &best);
                for p in syms.windows(2) {
                    let pair = (p[0].clone(), p[1].clone());
                    *counts.entry(pair.clone()).or_default() += *c;
                    where_.entry(pair).or_default().insert(i);
                }
            }
            counts.remove(&best);
            merges.push(best);
        }
        Self::from_merges(merges)
    }

    /// Segments one word into subword symbols (with `</w>` still attached).
    fn segment_raw(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| {
                    self.ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, (p[0].clone(), p[1].clone())))
                })
                .min_by_key(|(r, _)| *r);
            match best {
                Some((_, pair)) => syms = merge_pair(&syms, &pair),
                None => return syms,
            }
        }
    }

    /// Segments one word into marked subwords.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let syms = self.segment_raw(word);
        let last = syms.len() - 1;
        syms.into_iter()
            .enumerate()
            .map(|(i, s)| {
                if i == last {
                    s.strip_suffix(END_OF_WORD).unwrap_or(&s).to_string()
                } else {
                    format!("{s}{CONTINUATION}")
                }
            })
            .collect()
    }

    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Segmentation {
        let mut subwords = Vec::new();
        let mut counts = Vec::with_capacity(tokens.len());
        for t in tokens {
            let seg = self.segment_word(t.as_ref());
            counts.push(seg.len());
            subwords.extend(seg);
        }
        Segmentation {
            subwords,
            boundaries: WordBoundaries(counts),
        }
    }

    /// Segments many sentences, caching per distinct word.
    pub fn apply_corpus<S: AsRef<str>>(&self, sentences: &[Vec<S>]) -> Vec<Segmentation> {
        let mut cache: HashMap<String, Vec<String>> = HashMap::new();
        sentences
            .iter()
            .map(|sent| {
                let mut subwords = Vec::new();
                let mut counts = Vec::with_capacity(sent.len());
                for t in sent {
                    let seg = cache
                        .entry(t.as_ref().to_string())
                        .or_insert_with(|| self.segment_word(t.as_ref()));
                    counts.push(seg.len());
                    subwords.extend(seg.iter().cloned());
                }
                Segmentation {
                    subwords,
                    boundaries: WordBoundaries(counts),
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        for (a, b) in &self.merges {
            writeln!(f, "{a} {b}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut merges = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(Error::Input(format!(
                        "{}:{}: expected two space-separated symbols",
                        path.display(),
                        n + 1
                    )))
                }
            }
        }
        Self::from_merges(merges)
    }
}

/// Undoes segmentation: joins `@@`-marked subwords back into words.
pub fn reconstruct<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for s in subwords {
        let s = s.as_ref();
        match s.strip_suffix(CONTINUATION) {
            Some(prefix) => current.push_str(prefix),
            None => {
                current.push_str(s);
                words.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(syms: &[String], pair: &Pair) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    fn low_corpus() -> Vec<&'static str> {
        let mut c = vec!["low"; 5];
        c.extend(["lower"; 2]);
        c.push("lowest");
        c
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = BpeModel::learn(["hello"], 0).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.segment_word("hello"), ["h@@", "e@@", "l@@", "l@@", "o"]);
    }

    #[test]
    fn single_candidate_pair() {
        let m = BpeModel::learn(["aaaa"], 1).unwrap();
        assert_eq!(m.merges(), &[pair("a", "a")]);
    }

    #[test]
    fn hand_simulated_merges() {
        // Counting by hand: (l,o)=8; then (lo,w</w>)=5; then (lo,w)=3 ties
        // (w,e)=3 and wins lexicographically; then (low,e)=3.
        let m = BpeModel::learn(low_corpus(), 4).unwrap();
        assert_eq!(
            m.merges(),
            &[
                pair("l", "o"),
                pair("lo", "w</w>"),
                pair("lo", "w"),
                pair("low", "e"),
            ]
        );
        assert_eq!(m.segment_word("lowest"), ["lowe@@", "s@@", "t"]);
        assert_eq!(m.segment_word("low"), ["low"]);
    }

    #[test]
    fn full_word_merge_gives_single_subword() {
        let m = BpeModel::learn(low_corpus(), 50).unwrap();
        assert_eq!(m.segment_word("lower"), ["lower"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            BpeModel::learn(Vec::<&str>::new(), 3),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn merge_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bpe.merges");
        let m = BpeModel::learn(low_corpus(), 4).unwrap();
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next(), Some("l o"));
        assert_eq!(BpeModel::load(&p).unwrap(), m);
    }

    #[test]
    fn boundaries_from_markers() {
        let b = WordBoundaries::from_subwords(&["Haus@@", "es", "ist", "gr@@", "o@@", "ss"]);
        assert_eq!(b.0, vec![2, 1, 3]);
        assert_eq!(b.word_of_subword(), vec![0, 0, 1, 2, 2, 2]);
    }

    proptest! {
        #[test]
        fn segmentation_is_lossless(
            corpus in prop::collection::vec("[a-z]{1,8}", 1..40),
            sentence in prop::collection::vec("[a-z]{1,10}", 0..12),
            merges in 0usize..60,
        ) {
            let model = BpeModel::learn(corpus.iter().map(String::as_str), merges).unwrap();
            let seg = model.apply(&sentence);
            prop_assert_eq!(reconstruct(&seg.subwords), sentence.clone());
            prop_assert_eq!(seg.boundaries.num_words(), sentence.len());
            prop_assert_eq!(seg.boundaries.num_subwords(), seg.subwords.len());
            prop_assert_eq!(&WordBoundaries::from_subwords(&seg.subwords), &seg.boundaries);
        }
    }
}
