//! Data directories, preprocessing and the baseline-versus-mention
//! experiment on the synthetic task.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{translate_all, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::apt::{apt, read_alignments, Alignment, AptInput, AptReport, Lexicon, DEFAULT_TRACKED};
use crate::eval::bleu::{bleu, BleuScore};
use crate::eval::contrastive::{contrastive_eval, read_sets, ContrastiveReport, ModelScorer};
use crate::eval::report::{format_table, source_tag_agreement, ReportRow};
use crate::eval::synth::{dictionary_align, write_synthetic_task, SynthSizes};
use crate::model::{Arch, Checkpoint, Example, Model, ModelConfig};
use crate::tensor::Float;
use crate::text::tags::{align_tags_with_corpus, read_tag_file};
use crate::text::{prepare_sentence, read_tokenized, BpeModel, MentionTag, Vocab};
use crate::train::{train, warm_start, OutputSpec, TrainConfig};

pub const BPE_FILE: &str = "bpe.merges";
pub const DICTIONARY_FILE: &str = "dictionary.json";
pub const CONTRASTIVE_FILE: &str = "contrastive.jsonl";
pub const EVAL_FILE: &str = "eval.json";

/// A tokenized parallel split with optional word-level mention tags.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
    pub src_tags: Option<Vec<Vec<MentionTag>>>,
    pub tgt_tags: Option<Vec<Vec<MentionTag>>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Finds `{stem}.tags` (mention tags) or `{stem}.pos` (POS tags).
fn load_side_tags(dir: &Path, stem: &str, corpus: &[Vec<String>]) -> Result<Option<Vec<Vec<MentionTag>>>> {
    for ext in ["tags", "pos"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return align_tags_with_corpus(&read_tag_file(&p)?, corpus).map(Some);
        }
    }
    Ok(None)
}

/// Reads `{split}.src`, `{split}.tgt` and any tag files next to them.
pub fn load_split(dir: &Path, split: &str) -> Result<Corpus> {
    let src = read_tokenized(&dir.join(format!("{split}.src")))?;
    let tgt = read_tokenized(&dir.join(format!("{split}.tgt")))?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment(format!(
            "{split}: {} source lines vs {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    let src_tags = load_side_tags(dir, &format!("{split}.src"), &src)?;
    let tgt_tags = load_side_tags(dir, &format!("{split}.tgt"), &tgt)?;
    Ok(Corpus { src, tgt, src_tags, tgt_tags })
}

/// BPE merges and the two vocabularies.
#[derive(Clone, Debug)]
pub struct Preprocessing {
    pub bpe: BpeModel,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

impl Preprocessing {
    /// Vocabularies over the BPE-segmented training split.
    pub fn from_bpe(bpe: BpeModel, train: &Corpus) -> Self {
        let seg = |side: &[Vec<String>]| -> Vec<String> {
            bpe.apply_corpus(side).into_iter().flat_map(|s| s.subwords).collect()
        };
        let s = seg(&train.src);
        let t = seg(&train.tgt);
        Preprocessing {
            src_vocab: Vocab::build(s.iter().map(String::as_str)),
            tgt_vocab: Vocab::build(t.iter().map(String::as_str)),
            bpe,
        }
    }

    /// Joint BPE over both sides of the training split.
    pub fn learn(train: &Corpus, merges: usize) -> Result<Self> {
        let words = train.src.iter().chain(&train.tgt).flatten().map(String::as_str);
        Ok(Self::from_bpe(BpeModel::learn(words, merges)?, train))
    }

    pub fn of_checkpoint<T: Float>(ckpt: &Checkpoint<T>) -> Result<Self> {
        match (&ckpt.bpe, &ckpt.src_vocab, &ckpt.tgt_vocab) {
            (Some(b), Some(s), Some(t)) => Ok(Preprocessing {
                bpe: b.clone(),
                src_vocab: s.clone(),
                tgt_vocab: t.clone(),
            }),
            _ => Err(Error::Input("checkpoint lacks BPE merges or vocabularies".into())),
        }
    }

    pub fn encode(&self, c: &Corpus) -> Result<Vec<Example>> {
        (0..c.len())
            .map(|i| {
                let s = prepare_sentence(
                    &c.src[i],
                    c.src_tags.as_ref().map(|t| t[i].as_slice()),
                    &self.bpe,
                    &self.src_vocab,
                )?;
                let t = prepare_sentence(
                    &c.tgt[i],
                    c.tgt_tags.as_ref().map(|t| t[i].as_slice()),
                    &self.bpe,
                    &self.tgt_vocab,
                )?;
                Ok(Example {
                    src: s.ids,
                    tgt: t.ids,
                    src_tags: s.tags,
                    tgt_tags: t.tags,
                })
            })
            .collect()
    }

    pub fn checkpoint<T: Float>(&self, model: Model<T>) -> Checkpoint<T> {
        Checkpoint {
            model,
            src_vocab: Some(self.src_vocab.clone()),
            tgt_vocab: Some(self.tgt_vocab.clone()),
            bpe: Some(self.bpe.clone()),
        }
    }

    pub fn output_spec<'a>(&'a self, dir: &'a Path) -> OutputSpec<'a> {
        OutputSpec {
            dir,
            src_vocab: Some(&self.src_vocab),
            tgt_vocab: Some(&self.tgt_vocab),
            bpe: Some(&self.bpe),
        }
    }
}

/// Reads `dictionary.json` (source word → target words) for the aligner.
pub fn load_dictionary(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub decode: DecodeConfig,
    pub tracked: Vec<String>,
    pub lexicon: Option<Lexicon>,
    pub split: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            decode: DecodeConfig::default(),
            tracked: DEFAULT_TRACKED.iter().map(|s| s.to_string()).collect(),
            lexicon: None,
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub row: ReportRow,
    pub bleu: BleuScore,
    pub apt: AptReport,
    pub contrastive: Option<ContrastiveReport>,
    pub translations: Vec<String>,
}

/// Translates the test split, then computes BLEU, APT (candidate
/// alignments from the data directory's dictionary), contrastive accuracy
/// and, for mention models, classifier agreement on dev.
pub fn evaluate<T: Float>(
    name: &str,
    ckpt: &Checkpoint<T>,
    data: &Path,
    opts: &EvalOptions,
) -> Result<ModelEval> {
    let test = load_split(data, &opts.split)?;
    let pre = Preprocessing::of_checkpoint(ckpt)?;
    let sources = test
        .src
        .iter()
        .map(|s| Ok((prepare_sentence(s, None, &pre.bpe, &pre.src_vocab)?.ids, None)))
        .collect::<Result<Vec<_>>>()?;
    let out = translate_all(&ckpt.model, &sources, &opts.decode)?;
    let cands: Vec<Vec<String>> = out
        .iter()
        .map(|t| crate::text::detokenize(&t.tokens, &pre.tgt_vocab))
        .collect();
    let b = bleu(&cands, &test.tgt, false)?;

    let align_path = data.join(format!("{}.align", opts.split));
    let align_ref = if align_path.exists() {
        read_alignments(&align_path)?
    } else {
        return Err(Error::Input(format!("missing {}", align_path.display())));
    };
    let dict = load_dictionary(&data.join(DICTIONARY_FILE))?;
    let align_cand: Vec<Alignment> = test
        .src
        .iter()
        .zip(&cands)
        .map(|(s, c)| dictionary_align(s, c, &dict))
        .collect();
    let a = apt(
        &AptInput {
            src: &test.src,
            cand: &cands,
            refs: &test.tgt,
            align_ref: &align_ref,
            align_cand: &align_cand,
        },
        &opts.tracked,
        opts.lexicon.as_ref(),
    )?;

    let sets_path = data.join(CONTRASTIVE_FILE);
    let contrastive = if sets_path.exists() {
        let scorer = ModelScorer {
            ckpt,
            mode: opts.decode.mask_mode(),
        };
        Some(contrastive_eval(&read_sets(&sets_path)?, &scorer)?)
    } else {
        None
    };

    let mut row = ReportRow::new(name, Some(&b), Some(&a), contrastive.as_ref());
    if ckpt.model.is_mention() {
        let dev = load_split(data, "dev")?;
        if dev.src_tags.is_some() {
            let ex = pre.encode(&dev)?;
            row.classifier_agreement = Some(source_tag_agreement(&ckpt.model, &ex, opts.decode.threshold, 64)?);
        }
    }
    Ok(ModelEval {
        row,
        bleu: b,
        apt: a,
        contrastive,
        translations: cands.iter().map(|c| c.join(" ")).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data_seed: u64,
    pub sizes: SynthSizes,
    pub bpe_merges: usize,
    pub seeds: Vec<u64>,
    /// Epochs for the baseline from scratch.
    pub baseline: TrainConfig,
    /// Extra epochs for the mention model warm-started from the baseline.
    pub mention: TrainConfig,
    /// Also continue the baseline for the same extra epochs, separating
    /// the effect of further training from that of the architecture.
    pub control: bool,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let baseline = TrainConfig {
            max_epochs: 8,
            ..TrainConfig::tiny()
        };
        let mention = TrainConfig {
            lr0: 5e-4,
            max_epochs: 4,
            warmup_steps: 100,
            ..TrainConfig::tiny()
        };
        ExperimentConfig {
            data_seed: 2024,
            sizes: SynthSizes::default(),
            bpe_merges: 200,
            seeds: vec![1, 2, 3],
            baseline,
            mention,
            control: false,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline: ReportRow,
    pub mention: ReportRow,
    pub control: Option<ReportRow>,
    pub baseline_dev_ppl: f64,
    pub mention_dev_ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedResult>,
    pub baseline_mean: ReportRow,
    pub mention_mean: ReportRow,
    pub control_mean: Option<ReportRow>,
}

impl ExperimentReport {
    pub fn table(&self) -> String {
        let mut rows = Vec::new();
        for r in &self.runs {
            rows.push(r.baseline.clone());
            rows.push(r.mention.clone());
            rows.extend(r.control.clone());
        }
        rows.push(self.baseline_mean.clone());
        rows.push(self.mention_mean.clone());
        rows.extend(self.control_mean.clone());
        format_table(&rows)
    }
}

/// Wall-clock seconds per stage, kept apart from the report so that the
/// report is reproducible bit for bit.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timing(pub BTreeMap<String, f64>);

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Generates the data, then per seed trains a baseline, warm-starts a
/// mention model from its best checkpoint, optionally continues the
/// baseline as a control, and evaluates them. Layout under
/// `out`: `data/`, `seed{S}/{baseline,mention,control}/`, `report.json`,
/// `report.txt`, `timing.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<(ExperimentReport, Timing)> {
    let mut timing = Timing::default();
    let t0 = Instant::now();
    let data = out.join("data");
    write_synthetic_task(&data, cfg.data_seed, &cfg.sizes)?;
    let train_c = load_split(&data, "train")?;
    let pre = Preprocessing::learn(&train_c, cfg.bpe_merges)?;
    pre.bpe.save(&data.join(BPE_FILE))?;
    let train_set = pre.encode(&train_c)?;
    let dev_set = pre.encode(&load_split(&data, "dev")?)?;
    timing.0.insert("data".into(), t0.elapsed().as_secs_f64());
    log::info!(
        "synthetic data: {} train pairs, vocab {}/{}",
        train_set.len(),
        pre.src_vocab.len(),
        pre.tgt_vocab.len()
    );

    let opts = EvalOptions {
        decode: cfg.decode.clone(),
        ..EvalOptions::default()
    };
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed{seed}"));
        let base_dir = dir.join("baseline");
        let men_dir = dir.join("mention");

        let t = Instant::now();
        let bcfg = ModelConfig::tiny(Arch::Baseline, pre.src_vocab.len(), pre.tgt_vocab.len());
        let tc = TrainConfig { seed, ..cfg.baseline.clone() };
        let base = train(
            Model::<f32>::new(bcfg.clone(), seed)?,
            &train_set,
            &dev_set,
            &tc,
            Some(&pre.output_spec(&base_dir)),
        )?;
        timing.0.insert(format!("seed{seed}.baseline.train"), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let mcfg = ModelConfig { arch: Arch::Mention, ..bcfg };
        let mut men = Model::<f32>::new(mcfg, seed)?;
        warm_start(&mut men, &base.best)?;
        let tc = TrainConfig { seed, ..cfg.mention.clone() };
        let men = train(men, &train_set, &dev_set, &tc, Some(&pre.output_spec(&men_dir)))?;
        timing.0.insert(format!("seed{seed}.mention.train"), t.elapsed().as_secs_f64());

        let mut models = vec![("baseline", base.best.clone(), base_dir), ("mention", men.best, men_dir)];
        if cfg.control {
            let t = Instant::now();
            let ctl_dir = dir.join("control");
            let ctl = train(base.best, &train_set, &dev_set, &tc, Some(&pre.output_spec(&ctl_dir)))?;
            timing.0.insert(format!("seed{seed}.control.train"), t.elapsed().as_secs_f64());
            models.push(("control", ctl.best, ctl_dir));
        }

        let t = Instant::now();
        let evals: Vec<ModelEval> = models
            .par_iter()
            .map(|(name, m, _)| evaluate(&format!("{name}/s{seed}"), &pre.checkpoint(m.clone()), &data, &opts))
            .collect::<Result<_>>()?;
        for (e, (_, _, d)) in evals.iter().zip(&models) {
            write_json(&d.join(EVAL_FILE), e)?;
        }
        timing.0.insert(format!("seed{seed}.eval"), t.elapsed().as_secs_f64());
        let rows: Vec<ReportRow> = evals.iter().map(|e| e.row.clone()).collect();
        log::info!("seed {seed}\n{}", format_table(&rows));
        runs.push(SeedResult {
            seed,
            baseline: rows[0].clone(),
            mention: rows[1].clone(),
            control: rows.get(2).cloned(),
            baseline_dev_ppl: base.best_record.dev_perplexity,
            mention_dev_ppl: men.best_record.dev_perplexity,
        });
    }
    let b: Vec<ReportRow> = runs.iter().map(|r| r.baseline.clone()).collect();
    let m: Vec<ReportRow> = runs.iter().map(|r| r.mention.clone()).collect();
    let report = ExperimentReport {
        config: cfg.clone(),
        baseline_mean: ReportRow::mean("baseline mean", &b),
        mention_mean: ReportRow::mean("mention mean", &m),
        control_mean: if cfg.control {
            let c: Vec<ReportRow> = runs.iter().filter_map(|r| r.control.clone()).collect();
            Some(ReportRow::mean("control mean", &c))
        } else {
            None
        },
        runs,
    };
    timing.0.insert("total".into(), t0.elapsed().as_secs_f64());
    write_json(&out.join("report.json"), &report)?;
    std::fs::write(out.join("report.txt"), report.table())?;
    write_json(&out.join("timing.json"), &timing)?;
    Ok((report, timing))
}
