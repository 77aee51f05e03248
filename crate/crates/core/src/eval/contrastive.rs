//! Contrastive pronoun evaluation: the reference must outscore every variant.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::score_batch;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Example, MaskMode};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveSet {
    pub src: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub contrastive: Vec<String>,
    pub distance: usize,
    pub pronoun: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bucket {
    Same,
    One,
    Far,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Same, Bucket::One, Bucket::Far];

    pub fn of(distance: usize) -> Bucket {
        match distance {
            0 => Bucket::Same,
            1 => Bucket::One,
            _ => Bucket::Far,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Same => "0",
            Bucket::One => "1",
            Bucket::Far => ">1",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

pub fn read_sets(path: &Path) -> Result<Vec<ContrastiveSet>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Input(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_sets(path: &Path, sets: &[ContrastiveSet]) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(f);
    for s in sets {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Scores candidate target sentences for one source sentence. Higher is
/// better.
pub trait SequenceScorer: Sync {
    fn score(&self, src: &str, targets: &[&str]) -> Result<Vec<f64>>;
}

/// Teacher-forced log-probability under a trained checkpoint.
pub struct ModelScorer<'a, T: Float> {
    pub ckpt: &'a Checkpoint<T>,
    pub mode: MaskMode,
}

impl<T: Float> SequenceScorer for ModelScorer<'_, T> {
    fn score(&self, src: &str, targets: &[&str]) -> Result<Vec<f64>> {
        let (s, _) = self.ckpt.encode_source(src, None)?;
        let pairs = targets
            .iter()
            .map(|t| Ok(Example::untagged(s.clone(), self.ckpt.encode_target(t)?)))
            .collect::<Result<Vec<_>>>()?;
        score_batch(&self.ckpt.model, &pairs, &self.mode)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

impl BucketStats {
    fn finish(mut self) -> Self {
        self.accuracy = (self.n > 0).then(|| self.correct as f64 / self.n as f64);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub overall: BucketStats,
    /// Keyed by `"0"`, `"1"`, `">1"`.
    pub buckets: Vec<(String, BucketStats)>,
    pub skipped: usize,
    /// One entry per input set; `None` for skipped sets.
    pub decisions: Vec<Option<bool>>,
}

impl ContrastiveReport {
    pub fn bucket(&self, b: Bucket) -> &BucketStats {
        &self.buckets[b.index()].1
    }
}

/// Strict comparison: a tie with any variant is a failure.
pub fn decide(ref_score: f64, variant_scores: &[f64]) -> bool {
    variant_scores.iter().all(|&v| ref_score > v)
}

pub fn contrastive_eval(sets: &[ContrastiveSet], scorer: &dyn SequenceScorer) -> Result<ContrastiveReport> {
    let decisions = sets
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.contrastive.is_empty() {
                log::warn!("contrastive set {} has no variants; skipped", i + 1);
                return Ok(None);
            }
            let mut targets = vec![s.reference.as_str()];
            targets.extend(s.contrastive.iter().map(String::as_str));
            let scores = scorer.score(&s.src, &targets)?;
            if scores.len() != targets.len() {
                return Err(Error::Contract(format!(
                    "scorer returned {} scores for {} targets",
                    scores.len(),
                    targets.len()
                )));
            }
            Ok(Some(decide(scores[0], &scores[1..])))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut buckets = [BucketStats::default(); 3];
    let mut overall = BucketStats::default();
    for (s, d) in sets.iter().zip(&decisions) {
        if let Some(ok) = d {
            let b = &mut buckets[Bucket::of(s.distance).index()];
            b.n += 1;
            overall.n += 1;
            if *ok {
                b.correct += 1;
                overall.correct += 1;
            }
        }
    }
    Ok(ContrastiveReport {
        overall: overall.finish(),
        buckets: Bucket::ALL
            .iter()
            .map(|&b| (b.label().to_string(), buckets[b.index()].finish()))
            .collect(),
        skipped: decisions.iter().filter(|d| d.is_none()).count(),
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Looks scores up in a table, plus a constant offset.
    struct Table(HashMap<String, f64>, f64);

    impl SequenceScorer for Table {
        fn score(&self, _src: &str, targets: &[&str]) -> Result<Vec<f64>> {
            Ok(targets.iter().map(|t| self.0[*t] + self.1).collect())
        }
    }

    fn set(r: &str, vs: &[&str], d: usize) -> ContrastiveSet {
        ContrastiveSet {
            src: "x".into(),
            reference: r.into(),
            contrastive: vs.iter().map(|s| s.to_string()).collect(),
            distance: d,
            pronoun: "it".into(),
        }
    }

    fn table() -> HashMap<String, f64> {
        [("a", -1.0), ("b", -2.0), ("c", -1.0), ("d", -0.5), ("e", -3.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    #[test]
    fn strict_ties_and_buckets() {
        let sets = vec![
            set("a", &["b"], 0),
            set("a", &["c"], 0),
            set("a", &["b", "d"], 1),
            set("d", &["a", "b", "e"], 5),
            set("a", &[], 2),
        ];
        let r = contrastive_eval(&sets, &Table(table(), 0.0)).unwrap();
        assert_eq!(r.decisions, vec![Some(true), Some(false), Some(false), Some(true), None]);
        assert_eq!(r.skipped, 1);
        assert_eq!(r.overall.n, 4);
        assert_eq!(r.overall.correct, 2);
        assert_eq!(r.bucket(Bucket::Same).n, 2);
        assert_eq!(r.bucket(Bucket::Far).accuracy, Some(1.0));
        let sum_c: usize = r.buckets.iter().map(|b| b.1.correct).sum();
        let sum_n: usize = r.buckets.iter().map(|b| b.1.n).sum();
        assert_eq!(sum_c as f64 / sum_n as f64, r.overall.accuracy.unwrap());
    }

    #[test]
    fn identical_variant_is_a_tie() {
        let r = contrastive_eval(&[set("a", &["a"], 0)], &Table(table(), 0.0)).unwrap();
        assert_eq!(r.decisions, vec![Some(false)]);
    }

    #[test]
    fn shift_invariance() {
        let sets: Vec<_> = ["a", "b", "c", "d", "e"]
            .iter()
            .flat_map(|r| ["a", "b", "c", "d", "e"].map(|v| set(r, &[v], 0)))
            .collect();
        let base = contrastive_eval(&sets, &Table(table(), 0.0)).unwrap();
        for k in [-7.25, 3.0, 1e3] {
            let shifted = contrastive_eval(&sets, &Table(table(), k)).unwrap();
            assert_eq!(shifted.decisions, base.decisions);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let sets = vec![set("a", &["b", "c"], 2)];
        write_sets(&p, &sets).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"ref\":\"a\""));
        assert_eq!(read_sets(&p).unwrap(), sets);
    }
}
