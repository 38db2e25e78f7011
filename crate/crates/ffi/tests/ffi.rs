use std::ffi::{c_char, CString};
use std::ptr;

use unlearn_lab_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { ul_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take(n.min(255)).map(|&b| b as u8).collect();
    String::from_utf8(bytes).unwrap()
}

const TINY: &str = r#"
seeds = [0]
known_fraction = 0.4
[corpus]
n_persons = 6
n_forget = 10
n_retain = 12
[model]
vocab_size = 259
d_model = 16
n_layers = 2
n_heads = 2
max_seq_len = 96
seed = 0
[base_train]
epochs = 1
[target_train]
epochs = 1
[attack]
ft_size = 4
ft_epochs = 1
max_new_tokens = 8
[[methods]]
spec = { method = "ga", hyper = { epochs = 1 } }
"#;

#[test]
fn null_pointers_are_reported() {
    unsafe {
        assert_eq!(ul_model_load(ptr::null(), ptr::null_mut()), UlStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut out = 0usize;
        assert_eq!(ul_model_num_layers(ptr::null(), &mut out), UlStatus::NullPointer);
        ul_model_free(ptr::null_mut());
        ul_workspace_free(ptr::null_mut());
    }
}

#[test]
fn model_round_trip_and_generation() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("m.ckpt").to_str().unwrap());
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(ul_model_init_default(3, &mut m), UlStatus::Ok);
        let (mut layers, mut params) = (0usize, 0usize);
        assert_eq!(ul_model_num_layers(m, &mut layers), UlStatus::Ok);
        assert_eq!(ul_model_num_params(m, &mut params), UlStatus::Ok);
        assert_eq!(layers, 4);
        assert!(params > 100_000 && params <= 1_000_000);
        assert_eq!(ul_model_save(m, path.as_ptr()), UlStatus::Ok);
        let mut m2 = ptr::null_mut();
        assert_eq!(ul_model_load(path.as_ptr(), &mut m2), UlStatus::Ok);

        let (p, a) = (c("Q: Tell me the email of Ann, A: "), c("x@y"));
        let (mut l1, mut l2) = (0.0, 0.0);
        assert_eq!(ul_model_logprob(m, p.as_ptr(), a.as_ptr(), &mut l1), UlStatus::Ok);
        assert_eq!(ul_model_logprob(m2, p.as_ptr(), a.as_ptr(), &mut l2), UlStatus::Ok);
        assert!(l1 < 0.0 && l1 == l2);

        let mut small = [0 as c_char; 2];
        let mut n = 0usize;
        assert_eq!(ul_model_generate(m, p.as_ptr(), 4, small.as_mut_ptr(), 2, &mut n), UlStatus::BufferTooSmall);
        let mut buf = vec![0 as c_char; n + 1];
        assert_eq!(ul_model_generate(m, p.as_ptr(), 4, buf.as_mut_ptr(), buf.len(), &mut n), UlStatus::Ok);
        assert_eq!(buf[n], 0);
        ul_model_free(m);
        ul_model_free(m2);

        let missing = c("/nonexistent/m.ckpt");
        let mut m3 = ptr::null_mut();
        assert_eq!(ul_model_load(missing.as_ptr(), &mut m3), UlStatus::Io);
        assert!(m3.is_null());
        assert!(!last_error().is_empty());
    }
}

#[test]
fn metrics() {
    unsafe {
        let mut hit = -1;
        assert_eq!(ul_pii_match(c("mail: a@b.c ok").as_ptr(), c(" a@b.c ").as_ptr(), &mut hit), UlStatus::Ok);
        assert_eq!(hit, 1);
        assert_eq!(ul_pii_match(c("nothing").as_ptr(), c("a@b.c").as_ptr(), &mut hit), UlStatus::Ok);
        assert_eq!(hit, 0);
        let mut r = 0.0;
        assert_eq!(ul_rouge_l(c("the cat sat").as_ptr(), c("the cat sat").as_ptr(), &mut r), UlStatus::Ok);
        assert_eq!(r, 1.0);
        let bad = [0xffu8, 0];
        assert_eq!(ul_rouge_l(bad.as_ptr() as *const c_char, c("x").as_ptr(), &mut r), UlStatus::InvalidUtf8);
    }
}

#[test]
fn pipeline_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let root = c(dir.path().to_str().unwrap());
    unsafe {
        let mut ws = ptr::null_mut();
        assert_eq!(ul_workspace_open_toml(c("nope = 1").as_ptr(), root.as_ptr(), &mut ws), UlStatus::Config);
        assert_eq!(ul_workspace_open_toml(c(TINY).as_ptr(), root.as_ptr(), &mut ws), UlStatus::Ok);
        assert_eq!(ul_workspace_train(ws, 0), UlStatus::Artifact);
        assert_eq!(ul_workspace_synth(ws, 0), UlStatus::Ok);
        assert_eq!(ul_workspace_train(ws, 0), UlStatus::Ok);
        assert_eq!(ul_workspace_coreset(ws, 0), UlStatus::Ok);
        assert_eq!(ul_workspace_unlearn(ws, 0, c("GA").as_ptr(), 0), UlStatus::Ok);
        assert_eq!(ul_workspace_unlearn(ws, 0, c("missing").as_ptr(), 0), UlStatus::Config);
        let mut rep = UlRecoveryReport::default();
        assert_eq!(ul_workspace_attack(ws, 0, c("GA").as_ptr(), &mut rep), UlStatus::Ok);
        assert!((0.0..=1.0).contains(&rep.p1_known) && (0.0..=100.0).contains(&rep.u1_rouge));
        assert_eq!(ul_workspace_analyze(ws, 0, c("GA").as_ptr()), UlStatus::Ok);
        assert_eq!(ul_workspace_report(ws), UlStatus::Ok);
        let mut m = ptr::null_mut();
        assert_eq!(ul_workspace_model(ws, 0, c("retrain").as_ptr(), &mut m), UlStatus::Ok);
        ul_model_free(m);
        ul_workspace_free(ws);
    }
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/unlearn_lab.h")).unwrap();
    for sym in ["ul_model_load", "ul_model_generate", "ul_workspace_attack", "ul_last_error", "UL_STATUS_OK", "UlRecoveryReport"] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        "#include \"unlearn_lab.h\"\nint main(void){ UlModel *m = 0; UlStatus s = ul_model_init_default(1, &m); ul_model_free(m); return s == UL_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = match std::process::Command::new(&cc)
        .args(["-fsyntax-only", "-std=c99", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler found; skipping");
            return;
        }
    };
    assert!(status.success());
}
