use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ssmlab_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        ssmlab_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn tiny() -> *mut SsmlabModel {
    let mut m = ptr::null_mut();
    let name = CString::new("tiny").unwrap();
    assert_eq!(unsafe { ssmlab_model_new(name.as_ptr(), 3, &mut m) }, SsmlabStatus::Ok);
    m
}

#[test]
fn model_lifecycle() {
    let m = tiny();
    let mut n = 0u64;
    unsafe {
        assert_eq!(ssmlab_model_num_params(m, &mut n), SsmlabStatus::Ok);
        assert_eq!(n, 363_520);
        let tokens = b"hello, world";
        let mut nll = vec![0.0; tokens.len() - 1];
        assert_eq!(ssmlab_model_score(m, tokens.as_ptr(), tokens.len(), nll.as_mut_ptr()), SsmlabStatus::Ok);
        assert!(nll.iter().all(|v| v.is_finite() && *v > 0.0));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(ssmlab_model_save(m, path.as_ptr()), SsmlabStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(ssmlab_model_load(path.as_ptr(), &mut back), SsmlabStatus::Ok);
        let mut nll2 = vec![0.0; tokens.len() - 1];
        ssmlab_model_score(back, tokens.as_ptr(), tokens.len(), nll2.as_mut_ptr());
        assert_eq!(nll, nll2);
        ssmlab_model_free(back);
        ssmlab_model_free(m);
        ssmlab_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported() {
    let mut m = ptr::null_mut();
    let bad = CString::new("huge").unwrap();
    unsafe {
        assert_eq!(ssmlab_model_new(bad.as_ptr(), 0, &mut m), SsmlabStatus::InvalidArgument);
        assert!(last_error().contains("huge"));
        assert!(m.is_null());
        assert_eq!(ssmlab_model_new(ptr::null(), 0, &mut m), SsmlabStatus::NullPointer);
        let mut n = 0;
        assert_eq!(ssmlab_model_num_params(ptr::null(), &mut n), SsmlabStatus::NullPointer);
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(ssmlab_model_load(missing.as_ptr(), &mut m), SsmlabStatus::Io);
        let t = tiny();
        let one = [1u8];
        let mut out = [0.0];
        assert_eq!(ssmlab_model_score(t, one.as_ptr(), 1, out.as_mut_ptr()), SsmlabStatus::InvalidArgument);
        ssmlab_model_free(t);
    }
    let n = unsafe { ssmlab_last_error(ptr::null_mut(), 0) };
    assert!(n > 0);
}

#[test]
fn stability_and_kernel_calls() {
    let (mut lam, mut ok) = (0.0, false);
    let mut bound = 0.0;
    let mut err = 0.0;
    let target = CString::new("exp:1@0.2,0.5@10").unwrap();
    unsafe {
        assert_eq!(ssmlab_max_safe_decay(100.0, 1.0, 1.0, 0.0, &mut lam, &mut ok), SsmlabStatus::Ok);
        assert!((lam - 0.99).abs() < 1e-12 && ok);
        assert_eq!(ssmlab_hidden_bound(0.99, 1.0, 1.0, 0.0, 0, &mut bound), SsmlabStatus::Ok);
        assert!((bound - 100.0).abs() < 1e-9);
        assert_eq!(ssmlab_kernel_extrapolation_error(target.as_ptr(), 2, 5.0, f64::INFINITY, &mut err), SsmlabStatus::Ok);
        assert!(err < 1e-6);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(ssmlab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ssmlab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["ssmlab_model_new", "ssmlab_model_free", "ssmlab_last_error", "SSMLAB_STATUS_OK", "typedef struct SsmlabModel SsmlabModel"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ssmlab.h\"\nint main(void) { SsmlabModel *m = 0; SsmlabStatus s = ssmlab_model_new(\"tiny\", 0, &m); ssmlab_model_free(m); return s == SSMLAB_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler; header syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
