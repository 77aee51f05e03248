use std::ffi::{CStr, CString};
use std::ptr;

use mention_nmt::decode::DecodeConfig;
use mention_nmt::eval::{make_synthetic_task, SynthSizes};
use mention_nmt::experiment::{Corpus, Preprocessing};
use mention_nmt::model::{save_checkpoint, Arch, Checkpoint, MaskMode, Model, ModelConfig};
use mention_nmt_ffi::*;

fn fixture(arch: Arch) -> (tempfile::TempDir, Checkpoint<f32>) {
    let t = make_synthetic_task(3, &SynthSizes { train: 200, dev: 5, test: 5, contrastive: 0, ..Default::default() });
    let c = Corpus {
        src: t.train.iter().map(|p| p.src.clone()).collect(),
        tgt: t.train.iter().map(|p| p.tgt.clone()).collect(),
        ..Corpus::default()
    };
    let pre = Preprocessing::learn(&c, 50).unwrap();
    let cfg = ModelConfig::tiny(arch, pre.src_vocab.len(), pre.tgt_vocab.len());
    let ck = pre.checkpoint(Model::<f32>::new(cfg, 4).unwrap());
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &ck).unwrap();
    (dir, ck)
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mn_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn translate_and_score_match_the_library() {
    let (dir, ck) = fixture(Arch::Mention);
    let path = cstr(dir.path().to_str().unwrap());
    let src = "the man buys the lamp . it is red .";
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(mn_model_load(path.as_ptr(), &mut m), MnStatus::Ok);
        let mut flag = -1;
        assert_eq!(mn_model_is_mention(m, &mut flag), MnStatus::Ok);
        assert_eq!(flag, 1);

        let mut out = ptr::null_mut();
        let s = cstr(src);
        assert_eq!(mn_translate(m, s.as_ptr(), 2, &mut out), MnStatus::Ok);
        let got = CStr::from_ptr(out).to_str().unwrap().to_string();
        mn_string_free(out);
        let cfg = DecodeConfig { beam: 2, ..DecodeConfig::default() };
        assert_eq!(got, ck.translate_line(src, None, &cfg).unwrap().0);

        let tgt = cstr("die lampe ist rot .");
        let mut score = 0.0;
        assert_eq!(mn_score(m, s.as_ptr(), tgt.as_ptr(), &mut score), MnStatus::Ok);
        let want = ck
            .score_line(src, "die lampe ist rot .", &MaskMode::Predicted { threshold: 0.5 })
            .unwrap();
        assert_eq!(score, want);
        assert!(last_error().is_empty());
        mn_model_free(m);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let (dir, _) = fixture(Arch::Baseline);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(mn_model_load(ptr::null(), &mut m), MnStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = cstr("/nonexistent/ckpt");
        assert_eq!(mn_model_load(missing.as_ptr(), &mut m), MnStatus::Io);
        assert!(m.is_null());
        assert!(!last_error().is_empty());

        let path = cstr(dir.path().to_str().unwrap());
        assert_eq!(mn_model_load(path.as_ptr(), ptr::null_mut()), MnStatus::NullPointer);
        assert_eq!(mn_model_load(path.as_ptr(), &mut m), MnStatus::Ok);
        let mut out = ptr::null_mut();
        let s = cstr("the lamp is red .");
        assert_eq!(mn_translate(m, s.as_ptr(), 0, &mut out), MnStatus::Contract);
        assert!(out.is_null());
        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(mn_translate(m, bad.as_ptr().cast(), 1, &mut out), MnStatus::InvalidUtf8);
        assert_eq!(mn_translate(ptr::null(), s.as_ptr(), 1, &mut out), MnStatus::NullPointer);
        mn_model_free(m);
        mn_model_free(ptr::null_mut());
        mn_string_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mention_nmt.h")).unwrap();
    for f in [
        "mn_model_load",
        "mn_model_free",
        "mn_model_is_mention",
        "mn_translate",
        "mn_score",
        "mn_string_free",
        "mn_last_error",
        "mn_version",
        "MN_STATUS_OK",
        "typedef struct MnModel MnModel",
    ] {
        assert!(h.contains(f), "header lacks {f}");
    }
    let v = unsafe { CStr::from_ptr(mn_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
