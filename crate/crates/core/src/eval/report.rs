//! Summary rows in the layout BLEU | APT | APT ambiguous | contrastive by distance.

use serde::{Deserialize, Serialize};

use super::apt::AptReport;
use super::bleu::BleuScore;
use super::contrastive::{Bucket, ContrastiveReport};
use crate::error::{Error, Result};
use crate::model::{Example, MaskMode, Model, SourceBatch};
use crate::tensor::Float;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub bleu: Option<f64>,
    pub apt: Option<f64>,
    pub apt_ambiguous: Option<f64>,
    pub contrastive: Option<f64>,
    /// Accuracy for distances 0, 1 and >1.
    pub by_distance: [Option<f64>; 3],
    pub classifier_agreement: Option<f64>,
}

impl ReportRow {
    pub fn new(
        name: impl Into<String>,
        bleu: Option<&BleuScore>,
        apt: Option<&AptReport>,
        contrastive: Option<&ContrastiveReport>,
    ) -> Self {
        ReportRow {
            name: name.into(),
            bleu: bleu.map(|b| b.score),
            apt: apt.and_then(|a| a.apt),
            apt_ambiguous: apt.and_then(|a| a.apt_ambiguous),
            contrastive: contrastive.and_then(|c| c.overall.accuracy),
            by_distance: Bucket::ALL.map(|b| contrastive.and_then(|c| c.bucket(b).accuracy)),
            classifier_agreement: None,
        }
    }

    /// Field-wise mean; a field is `None` if it is missing in any row.
    pub fn mean(name: impl Into<String>, rows: &[ReportRow]) -> ReportRow {
        let avg = |f: &dyn Fn(&ReportRow) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = rows.iter().map(f).collect();
            v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        ReportRow {
            name: name.into(),
            bleu: avg(&|r| r.bleu),
            apt: avg(&|r| r.apt),
            apt_ambiguous: avg(&|r| r.apt_ambiguous),
            contrastive: avg(&|r| r.contrastive),
            by_distance: [0, 1, 2].map(|i| avg(&|r: &ReportRow| r.by_distance[i])),
            classifier_agreement: avg(&|r| r.classifier_agreement),
        }
    }
}

fn cell(v: Option<f64>, pct: bool) -> String {
    match v {
        Some(x) if pct => format!("{:.1}", 100.0 * x),
        Some(x) => format!("{x:.2}"),
        None => "-".into(),
    }
}

/// Aligned text table. Accuracies are shown as percentages.
pub fn format_table(rows: &[ReportRow]) -> String {
    let header = ["model", "BLEU", "APT", "APT amb", "Contr", "d=0", "d=1", "d>1", "Cls agr"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                cell(r.bleu, false),
                cell(r.apt, true),
                cell(r.apt_ambiguous, true),
                cell(r.contrastive, true),
                cell(r.by_distance[0], true),
                cell(r.by_distance[1], true),
                cell(r.by_distance[2], true),
                cell(r.classifier_agreement, true),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<String>| -> String {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

/// Fraction of non-pad source positions where the thresholded source
/// classifier agrees with the gold mention tag.
pub fn source_tag_agreement<T: Float>(
    model: &Model<T>,
    examples: &[Example],
    threshold: f64,
    batch_size: usize,
) -> Result<f64> {
    if !model.is_mention() {
        return Err(Error::Contract("classifier agreement needs a mention model".into()));
    }
    let (mut agree, mut total) = (0usize, 0usize);
    for chunk in examples.chunks(batch_size.max(1)) {
        let srcs: Vec<&[usize]> = chunk.iter().map(|e| e.src.as_slice()).collect();
        let tags = chunk
            .iter()
            .map(|e| e.src_tags.as_deref())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Input("classifier agreement needs gold source tags".into()))?;
        let batch = SourceBatch::new(&srcs, Some(&tags))?;
        let gold = batch.padded_tags().expect("tags present");
        let mut g = model.graph();
        let enc = model.encode_source(&mut g, &batch, &MaskMode::Predicted { threshold })?;
        let mask = enc.mask.expect("mention model yields a mask");
        for i in 0..gold.len() {
            if !batch.pad[i] {
                total += 1;
                agree += (mask.keep[i] == gold[i]) as usize;
            }
        }
    }
    if total == 0 {
        return Err(Error::Input("no source tokens to compare".into()));
    }
    Ok(agree as f64 / total as f64)
}
