use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mention_nmt::decode::{translate_all, DecodeConfig, MaskSource};
use mention_nmt::eval::apt::{apt, read_alignments, AptInput, Lexicon, DEFAULT_TRACKED};
use mention_nmt::eval::contrastive::{contrastive_eval, read_sets, ModelScorer};
use mention_nmt::eval::report::{format_table, ReportRow};
use mention_nmt::eval::{bleu, write_synthetic_task, SynthSizes};
use mention_nmt::experiment::{
    evaluate, load_split, run_experiment, EvalOptions, ExperimentConfig, ExperimentReport, ModelEval,
    Preprocessing, BPE_FILE, EVAL_FILE,
};
use mention_nmt::mention::LossWeights;
use mention_nmt::model::{load_checkpoint, read_manifest, Arch, Checkpoint, Example, MaskMode, Model, ModelConfig};
use mention_nmt::tensor::{DType, Float};
use mention_nmt::text::tags::{map_pos_to_mention, read_tag_file, write_tag_file};
use mention_nmt::text::{propagate_tags, read_lines, read_tokenized, tokenize, write_lines, BpeModel, MentionTag, WordBoundaries};
use mention_nmt::train::grad_check::{grad_check_model, GradCheckConfig};
use mention_nmt::train::{train, warm_start, TrainConfig};

/// Environment variable for the worker thread count.
const THREADS_ENV: &str = "MENTION_NMT_THREADS";

#[derive(Parser)]
#[command(name = "mention-nmt", version, about = "Transformer NMT with source-mention attention")]
struct Cli {
    /// Worker threads for parallel decoding and scoring (also via MENTION_NMT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Learn BPE merges from whitespace-tokenized files.
    BpeLearn {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        merges: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a file with learned merges.
    BpeApply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map a POS tag file (token<TAB>POS) to mention tags.
    TagMap {
        #[arg(long)]
        pos_tags: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy word tags onto subwords, one line of tags per sentence.
    TagPropagate {
        #[arg(long)]
        tags: PathBuf,
        /// The BPE-segmented corpus; word boundaries come from `@@` markers.
        #[arg(long)]
        bpe_boundaries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic ambiguous-pronoun task.
    MakeSynth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20_000)]
        train: usize,
        #[arg(long, default_value_t = 1_000)]
        dev: usize,
        #[arg(long, default_value_t = 1_000)]
        test: usize,
        #[arg(long, default_value_t = 1_000)]
        contrastive: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Train(TrainArgs),
    /// Beam-search translation of a tokenized file.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, value_enum, default_value_t = MaskSource::Predicted)]
        mask_mode: MaskSource,
        /// Word-level tag file for `--mask-mode gold`.
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Per-sentence JSONL with scores, length flags and masks.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Teacher-forced log-probabilities of target lines.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, value_enum, default_value_t = MaskSource::Predicted)]
        mask_mode: MaskSource,
        #[arg(long)]
        out: PathBuf,
    },
    EvalBleu {
        #[arg(long)]
        cand: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Add-one smoothing for n ≥ 2.
        #[arg(long)]
        smooth: bool,
    },
    EvalApt {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        cand: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        align_ref: PathBuf,
        #[arg(long)]
        align_cand: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Comma-separated source pronouns.
        #[arg(long, value_delimiter = ',')]
        tracked: Option<Vec<String>>,
    },
    EvalContrastive {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sets: PathBuf,
        #[arg(long, value_enum, default_value_t = MaskSource::Predicted)]
        mask_mode: MaskSource,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translate a data directory's test split and compute every metric.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        /// Defaults to `<ckpt>/../eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check on the tiny preset in f64.
    GradCheck {
        #[arg(long, value_enum, default_value_t = Arch::Mention)]
        arch: Arch,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 24)]
        probes: usize,
    },
    /// Summarize a run directory as a table.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Baseline versus mention model over several seeds on synthetic data.
    Experiment {
        #[arg(long)]
        out: PathBuf,
        /// JSON experiment config; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Tiny,
    Base,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat JSON config; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    /// Baseline checkpoint to warm-start from.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    save: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    bpe_merges: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

/// Flat training configuration as stored in files and manifests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FlatConfig {
    arch: Option<Arch>,
    preset: Option<Preset>,
    seed: Option<u64>,
    max_epochs: Option<usize>,
    lr0: Option<f64>,
    warmup_steps: Option<usize>,
    token_batch_size: Option<usize>,
    bpe_merges: Option<usize>,
    precision: Option<Precision>,
    loss_mt: Option<f64>,
    loss_src: Option<f64>,
    loss_tgt: Option<f64>,
    dropout: Option<f64>,
    label_smoothing: Option<f64>,
}

impl FlatConfig {
    /// Fields set in `over` replace those in `self`.
    fn overlay(self, over: FlatConfig) -> FlatConfig {
        macro_rules! pick {
            ($($f:ident),*) => { FlatConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(arch, preset, seed, max_epochs, lr0, warmup_steps, token_batch_size, bpe_merges,
              precision, loss_mt, loss_src, loss_tgt, dropout, label_smoothing)
    }

    fn from_args(a: &TrainArgs) -> FlatConfig {
        FlatConfig {
            arch: a.arch,
            preset: a.preset,
            seed: a.seed,
            max_epochs: a.epochs,
            lr0: a.lr,
            warmup_steps: a.warmup,
            token_batch_size: a.batch_tokens,
            bpe_merges: a.bpe_merges,
            precision: a.precision,
            ..FlatConfig::default()
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a FlatConfig,
    config_hash: String,
    train_config: &'a TrainConfig,
    model_config: &'a ModelConfig,
    data: &'a Path,
    init_from: Option<&'a Path>,
    version: &'static str,
}

fn config_hash<S: Serialize>(v: &S) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(v)?)))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => read_json::<FlatConfig>(p)?,
        None => FlatConfig::default(),
    };
    let cfg = file.overlay(FlatConfig::from_args(a));
    let arch = cfg.arch.unwrap_or(Arch::Baseline);
    let preset = cfg.preset.unwrap_or(Preset::Tiny);
    if arch == Arch::Baseline && a.init_from.is_some() {
        bail!("--init-from warm-starts a mention model; use --arch mention");
    }
    let mut tc = match preset {
        Preset::Tiny => TrainConfig::tiny(),
        Preset::Base => TrainConfig::default(),
    };
    if let Some(v) = cfg.seed {
        tc.seed = v;
    }
    if let Some(v) = cfg.max_epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = cfg.lr0 {
        tc.lr0 = v;
    }
    if let Some(v) = cfg.warmup_steps {
        tc.warmup_steps = v;
    }
    if let Some(v) = cfg.token_batch_size {
        tc.token_batch_size = v;
    }
    let d = LossWeights::default();
    tc.loss_weights = LossWeights {
        mt: cfg.loss_mt.unwrap_or(d.mt),
        src: cfg.loss_src.unwrap_or(d.src),
        tgt: cfg.loss_tgt.unwrap_or(d.tgt),
    };
    tc.precision = match cfg.precision.unwrap_or(Precision::F32) {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    };
    match tc.precision {
        DType::F32 => train_with::<f32>(a, &cfg, arch, preset, tc),
        DType::F64 => train_with::<f64>(a, &cfg, arch, preset, tc),
    }
}

fn train_with<T: Float>(a: &TrainArgs, cfg: &FlatConfig, arch: Arch, preset: Preset, tc: TrainConfig) -> Result<()> {
    let train_c = load_split(&a.data, "train")?;
    let dev_c = load_split(&a.data, "dev")?;
    let init: Option<Checkpoint<T>> = match &a.init_from {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let pre = match &init {
        Some(c) => Preprocessing::of_checkpoint(c)?,
        None if a.data.join(BPE_FILE).exists() => {
            Preprocessing::from_bpe(BpeModel::load(&a.data.join(BPE_FILE))?, &train_c)
        }
        None => Preprocessing::learn(&train_c, cfg.bpe_merges.unwrap_or(200))?,
    };
    let mut mcfg = match (&init, preset) {
        (Some(c), _) => ModelConfig { arch, ..c.model.config().clone() },
        (None, Preset::Tiny) => ModelConfig::tiny(arch, pre.src_vocab.len(), pre.tgt_vocab.len()),
        (None, Preset::Base) => ModelConfig::base(arch, pre.src_vocab.len(), pre.tgt_vocab.len()),
    };
    if let Some(v) = cfg.dropout {
        mcfg.dropout = v;
    }
    if let Some(v) = cfg.label_smoothing {
        mcfg.label_smoothing = v;
    }
    let mut model = Model::<T>::new(mcfg.clone(), tc.seed)?;
    if let Some(c) = &init {
        let r = warm_start(&mut model, &c.model)?;
        log::info!("warm start: {} copied, {} fresh, {} ignored", r.copied.len(), r.fresh.len(), r.ignored.len());
    }
    std::fs::create_dir_all(&a.save).with_context(|| format!("creating {}", a.save.display()))?;
    let hash = config_hash(&(cfg, &tc, &mcfg))?;
    write_json(
        &a.save.join("run.json"),
        &RunManifest {
            command: "train",
            config: cfg,
            config_hash: hash,
            train_config: &tc,
            model_config: &mcfg,
            data: &a.data,
            init_from: a.init_from.as_deref(),
            version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    let out = train(model, &pre.encode(&train_c)?, &pre.encode(&dev_c)?, &tc, Some(&pre.output_spec(&a.save)))?;
    println!(
        "best epoch {} (step {}): dev perplexity {:.4}; checkpoint in {}",
        out.best_record.epoch,
        out.best_record.step,
        out.best_record.dev_perplexity,
        a.save.join(mention_nmt::train::BEST_DIR).display()
    );
    Ok(())
}

fn ckpt_dtype(dir: &Path) -> Result<DType> {
    Ok(read_manifest(dir)?.dtype)
}

fn mask_mode(source: MaskSource) -> MaskMode {
    DecodeConfig { mask: source, ..DecodeConfig::default() }.mask_mode()
}

#[derive(Serialize)]
struct SidecarLine<'a> {
    line: usize,
    translation: &'a str,
    log_prob: f64,
    score: f64,
    hit_max_len: bool,
    mask: Option<&'a [bool]>,
    mask_source: Option<MaskSource>,
}

fn translate_with<T: Float>(
    ckpt: &Path,
    input: &Path,
    tags: Option<&Path>,
    dc: &DecodeConfig,
    out: &Path,
    sidecar: Option<&Path>,
) -> Result<()> {
    let ck: Checkpoint<T> = load_checkpoint(ckpt)?;
    let lines = read_lines(input)?;
    let word_tags: Option<Vec<Vec<MentionTag>>> = match tags {
        Some(p) => {
            let rows = read_tag_file(p)?;
            let corpus: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).collect();
            Some(mention_nmt::text::tags::align_tags_with_corpus(&rows, &corpus)?)
        }
        None => None,
    };
    let sources = lines
        .iter()
        .enumerate()
        .map(|(i, l)| ck.encode_source(l, word_tags.as_ref().map(|t| t[i].as_slice())))
        .collect::<mention_nmt::Result<Vec<_>>>()?;
    let results = translate_all(&ck.model, &sources, dc)?;
    let texts = results
        .iter()
        .map(|t| ck.decode_target(&t.tokens))
        .collect::<mention_nmt::Result<Vec<_>>>()?;
    write_lines(out, &texts)?;
    if let Some(p) = sidecar {
        let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
        for (i, (t, text)) in results.iter().zip(&texts).enumerate() {
            serde_json::to_writer(
                &mut w,
                &SidecarLine {
                    line: i + 1,
                    translation: text,
                    log_prob: t.log_prob,
                    score: t.score,
                    hit_max_len: t.hit_max_len,
                    mask: t.mask.as_deref(),
                    mask_source: t.mask_source,
                },
            )?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    let capped = results.iter().filter(|t| t.hit_max_len).count();
    if capped > 0 {
        log::warn!("{capped} translations hit the length limit");
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoreLine {
    line: usize,
    log_prob: f64,
    token_log_probs: Vec<f64>,
}

fn score_with<T: Float>(ckpt: &Path, src: &Path, tgt: &Path, mode: &MaskMode, out: &Path) -> Result<()> {
    let ck: Checkpoint<T> = load_checkpoint(ckpt)?;
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        bail!("{} source lines vs {} target lines", s.len(), t.len());
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    for (i, (a, b)) in s.iter().zip(&t).enumerate() {
        let ex = Example::untagged(ck.encode_source(a, None)?.0, ck.encode_target(b)?);
        let toks = mention_nmt::decode::token_log_probs(&ck.model, &[ex], mode)?.remove(0);
        serde_json::to_writer(
            &mut w,
            &ScoreLine { line: i + 1, log_prob: toks.iter().sum(), token_log_probs: toks },
        )?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn contrastive_with<T: Float>(ckpt: &Path, sets: &Path, mode: MaskMode, out: Option<&Path>) -> Result<()> {
    let ck: Checkpoint<T> = load_checkpoint(ckpt)?;
    let sets = read_sets(sets)?;
    let r = contrastive_eval(&sets, &ModelScorer { ckpt: &ck, mode })?;
    let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    println!("overall {} (n={}, skipped {})", pct(r.overall.accuracy), r.overall.n, r.skipped);
    for (label, b) in &r.buckets {
        println!("distance {label:>2}: {} (n={})", pct(b.accuracy), b.n);
    }
    if let Some(p) = out {
        write_json(p, &r)?;
    }
    Ok(())
}

fn evaluate_with<T: Float>(ckpt: &Path, data: &Path, name: &str, beam: usize, out: &Path) -> Result<()> {
    let ck: Checkpoint<T> = load_checkpoint(ckpt)?;
    let opts = EvalOptions {
        decode: DecodeConfig { beam, ..DecodeConfig::default() },
        ..EvalOptions::default()
    };
    let e = evaluate(name, &ck, data, &opts)?;
    write_json(out, &e)?;
    print!("{}", format_table(&[e.row]));
    Ok(())
}

/// Collects `eval.json` files up to three levels below `dir`.
fn find_evals(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(EVAL_FILE);
    if p.exists() {
        out.push(p);
    }
    if depth == 0 {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        find_evals(&e, depth - 1, out)?;
    }
    Ok(())
}

fn cmd_report(run: &Path) -> Result<()> {
    let exp = run.join("report.json");
    if exp.exists() {
        let r: ExperimentReport = read_json(&exp)?;
        print!("{}", r.table());
        return Ok(());
    }
    let mut files = Vec::new();
    find_evals(run, 3, &mut files)?;
    if files.is_empty() {
        bail!("no report.json or {EVAL_FILE} under {}", run.display());
    }
    let rows = files
        .iter()
        .map(|p| Ok(read_json::<ModelEval>(p)?.row))
        .collect::<Result<Vec<ReportRow>>>()?;
    let mut groups: BTreeMap<String, Vec<ReportRow>> = BTreeMap::new();
    for r in &rows {
        let arch = r.name.split('/').next().unwrap_or(&r.name).to_string();
        groups.entry(arch).or_default().push(r.clone());
    }
    let mut table = rows.clone();
    if rows.len() > groups.len() {
        for (k, v) in &groups {
            table.push(ReportRow::mean(format!("{k} mean"), v));
        }
    }
    print!("{}", format_table(&table));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::BpeLearn { input, merges, out } => {
            let mut words = Vec::new();
            for p in &input {
                words.extend(read_tokenized(p)?.into_iter().flatten());
            }
            let m = BpeModel::learn(words.iter().map(String::as_str), merges)?;
            m.save(&out)?;
            println!("learned {} merges", m.len());
        }
        Cmd::BpeApply { model, input, out } => {
            let m = BpeModel::load(&model)?;
            let lines: Vec<String> = read_tokenized(&input)?
                .iter()
                .map(|s| m.apply(s).subwords.join(" "))
                .collect();
            write_lines(&out, &lines)?;
        }
        Cmd::TagMap { pos_tags, out } => {
            let rows = read_tag_file(&pos_tags)?;
            let mapped: Vec<Vec<(String, String)>> = rows
                .iter()
                .map(|s| {
                    let tags = map_pos_to_mention(&s.iter().map(|r| r.1.as_str()).collect::<Vec<_>>());
                    s.iter().zip(tags).map(|(r, t)| (r.0.clone(), t.to_string())).collect()
                })
                .collect();
            write_tag_file(&out, &mapped)?;
        }
        Cmd::TagPropagate { tags, bpe_boundaries, out } => {
            let rows = read_tag_file(&tags)?;
            let seg = read_tokenized(&bpe_boundaries)?;
            if rows.len() != seg.len() {
                bail!("{} tagged sentences vs {} segmented lines", rows.len(), seg.len());
            }
            let lines = rows
                .iter()
                .zip(&seg)
                .enumerate()
                .map(|(i, (r, s))| {
                    let word_tags: Vec<MentionTag> = r.iter().map(|x| MentionTag::from_tag_or_pos(&x.1)).collect();
                    let sub = propagate_tags(&word_tags, &WordBoundaries::from_subwords(s))
                        .with_context(|| format!("sentence {}", i + 1))?;
                    Ok(sub.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "))
                })
                .collect::<Result<Vec<_>>>()?;
            write_lines(&out, &lines)?;
        }
        Cmd::MakeSynth { seed, train, dev, test, contrastive, out } => {
            let sizes = SynthSizes { train, dev, test, contrastive, ..SynthSizes::default() };
            let t = write_synthetic_task(&out, seed, &sizes)?;
            println!(
                "wrote {} / {} / {} pairs and {} contrastive sets to {}",
                t.train.len(),
                t.dev.len(),
                t.test.len(),
                t.contrastive.len(),
                out.display()
            );
        }
        Cmd::Train(a) => cmd_train(&a)?,
        Cmd::Translate { ckpt, input, beam, mask_mode, tags, max_len, out, sidecar } => {
            let mut dc = DecodeConfig { beam, mask: mask_mode, ..DecodeConfig::default() };
            if let Some(m) = max_len {
                dc.max_len = m;
            }
            match ckpt_dtype(&ckpt)? {
                DType::F32 => translate_with::<f32>(&ckpt, &input, tags.as_deref(), &dc, &out, sidecar.as_deref())?,
                DType::F64 => translate_with::<f64>(&ckpt, &input, tags.as_deref(), &dc, &out, sidecar.as_deref())?,
            }
        }
        Cmd::Score { ckpt, src, tgt, mask_mode: m, out } => {
            if m == MaskSource::Gold {
                bail!("scoring reads untagged text; use --mask-mode predicted");
            }
            match ckpt_dtype(&ckpt)? {
                DType::F32 => score_with::<f32>(&ckpt, &src, &tgt, &mask_mode(m), &out)?,
                DType::F64 => score_with::<f64>(&ckpt, &src, &tgt, &mask_mode(m), &out)?,
            }
        }
        Cmd::EvalBleu { cand, reference, smooth } => {
            let c = read_tokenized(&cand)?;
            let r = read_tokenized(&reference)?;
            let s = bleu(&c, &r, smooth)?;
            println!("{:.1}", s.score);
            log::info!("{s:?}");
        }
        Cmd::EvalApt { src, cand, reference, align_ref, align_cand, lexicon, tracked } => {
            let src = read_tokenized(&src)?;
            let cand = read_tokenized(&cand)?;
            let refs = read_tokenized(&reference)?;
            let ar = read_alignments(&align_ref)?;
            let ac = read_alignments(&align_cand)?;
            let lx = lexicon.as_deref().map(Lexicon::load).transpose()?;
            let tracked = tracked.unwrap_or_else(|| DEFAULT_TRACKED.iter().map(|s| s.to_string()).collect());
            let r = apt(
                &AptInput { src: &src, cand: &cand, refs: &refs, align_ref: &ar, align_cand: &ac },
                &tracked,
                lx.as_ref(),
            )?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::EvalContrastive { ckpt, sets, mask_mode: m, out } => {
            if m == MaskSource::Gold {
                bail!("contrastive sets carry no tags; use --mask-mode predicted");
            }
            match ckpt_dtype(&ckpt)? {
                DType::F32 => contrastive_with::<f32>(&ckpt, &sets, mask_mode(m), out.as_deref())?,
                DType::F64 => contrastive_with::<f64>(&ckpt, &sets, mask_mode(m), out.as_deref())?,
            }
        }
        Cmd::Evaluate { ckpt, data, name, beam, out } => {
            let name = name.unwrap_or_else(|| read_manifest(&ckpt).map(|m| m.config.arch.to_string()).unwrap_or_default());
            let out = match out {
                Some(o) => o,
                None => ckpt.parent().unwrap_or(Path::new(".")).join(EVAL_FILE),
            };
            match ckpt_dtype(&ckpt)? {
                DType::F32 => evaluate_with::<f32>(&ckpt, &data, &name, beam, &out)?,
                DType::F64 => evaluate_with::<f64>(&ckpt, &data, &name, beam, &out)?,
            }
        }
        Cmd::GradCheck { arch, seed, tolerance, probes } => {
            let r = grad_check_model(&GradCheckConfig { arch, seed, tolerance, random_probes: probes, ..Default::default() })?;
            for p in &r.probes {
                log::info!("{}[{}]: analytic {:.6e} numeric {:.6e} rel {:.2e}", p.param, p.index, p.analytic, p.numeric, p.rel_err);
            }
            println!("probes {} max rel. err {:.3e} (tolerance {:.0e})", r.probes.len(), r.max_rel_err, tolerance);
            if !r.passed {
                bail!("gradient check failed");
            }
        }
        Cmd::Report { run } => cmd_report(&run)?,
        Cmd::Experiment { out, config, seeds } => {
            let mut cfg = match config {
                Some(p) => read_json::<ExperimentConfig>(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let (r, t) = run_experiment(&cfg, &out)?;
            print!("{}", r.table());
            println!("total {:.0} s", t.0.get("total").copied().unwrap_or(0.0));
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
