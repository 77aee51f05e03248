use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mention-nmt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn bleu_of_reference_against_itself() {
    let d = tempfile::tempdir().unwrap();
    let f = d.path().join("ref.txt");
    std::fs::write(&f, "the cat sat on the mat .\nit was red .\n").unwrap();
    assert_eq!(ok(&["eval-bleu", "--cand", p(&f), "--ref", p(&f)]).trim(), "100.0");
}

#[test]
fn line_count_mismatch_exits_with_error() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a.txt");
    let b = d.path().join("b.txt");
    std::fs::write(&a, "one line\n").unwrap();
    std::fs::write(&b, "one line\ntwo lines\n").unwrap();
    let o = run(&["eval-bleu", "--cand", p(&a), "--ref", p(&b)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check", "--probes", "8"]);
    assert!(out.starts_with("probes "), "{out}");
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let base = d.path().join("baseline");
    let ment = d.path().join("mention");
    ok(&[
        "make-synth", "--seed", "3", "--train", "300", "--dev", "40", "--test", "30",
        "--contrastive", "20", "--out", p(&data),
    ]);
    ok(&[
        "bpe-learn", "--input", p(&data.join("train.src")), p(&data.join("train.tgt")),
        "--merges", "40", "--out", p(&data.join("bpe.merges")),
    ]);
    ok(&[
        "train", "--arch", "baseline", "--preset", "tiny", "--epochs", "1", "--data", p(&data),
        "--save", p(&base),
    ]);
    ok(&[
        "train", "--arch", "mention", "--preset", "tiny", "--epochs", "1", "--data", p(&data),
        "--init-from", p(&base.join("best")), "--save", p(&ment),
    ]);
    assert!(ment.join("run.json").exists());

    let hyp = d.path().join("hyp.txt");
    let side = d.path().join("side.jsonl");
    ok(&[
        "translate", "--ckpt", p(&ment.join("best")), "--input", p(&data.join("test.src")),
        "--beam", "2", "--out", p(&hyp), "--sidecar", p(&side),
    ]);
    let lines = std::fs::read_to_string(&hyp).unwrap().lines().count();
    assert_eq!(lines, 30);
    assert_eq!(std::fs::read_to_string(&side).unwrap().lines().count(), 30);

    let score: f64 = ok(&["eval-bleu", "--cand", p(&hyp), "--ref", p(&data.join("test.tgt"))])
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=100.0).contains(&score));
}
