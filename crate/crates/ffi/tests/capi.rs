use std::ffi::{c_char, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use guidance_lab_ffi::*;

fn last_error() -> String {
    unsafe {
        let n = gl_last_error_message(ptr::null_mut(), 0);
        let mut buf = vec![0u8; n + 1];
        gl_last_error_message(buf.as_mut_ptr().cast::<c_char>(), buf.len());
        String::from_utf8(buf[..n].to_vec()).unwrap()
    }
}

fn ring(steps: usize) -> *mut GlModel {
    let name = CString::new("ring").unwrap();
    let m = unsafe { gl_model_new_preset(name.as_ptr(), ptr::null(), steps) };
    assert!(!m.is_null(), "{}", last_error());
    m
}

#[test]
fn handle_lifecycle_and_queries() {
    let m = ring(20);
    unsafe {
        assert_eq!(gl_model_dim(m), 2);
        assert_eq!(gl_model_num_classes(m), 2);
        assert_eq!(gl_model_steps(m), 20);
        gl_model_free(m);
        gl_model_free(ptr::null_mut());
        assert_eq!(gl_model_dim(ptr::null()), 0);
    }
}

#[test]
fn bad_constructor_arguments_return_null_with_message() {
    let bad = CString::new("spiral").unwrap();
    let m = unsafe { gl_model_new_preset(bad.as_ptr(), ptr::null(), 20) };
    assert!(m.is_null());
    assert!(!last_error().is_empty());
    let m = unsafe { gl_model_new_preset(ptr::null(), ptr::null(), 20) };
    assert!(m.is_null());
    assert!(last_error().contains("preset"));
    let path = CString::new("/nonexistent/model.json").unwrap();
    let m = unsafe { gl_model_load_mlp(path.as_ptr(), ptr::null(), 20) };
    assert!(m.is_null());
    assert!(last_error().contains("/nonexistent/model.json"));
}

#[test]
fn cfg_generation_counts_nfe_and_sentinel_ag_matches() {
    let m = ring(20);
    let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
    let (mut na, mut nb) = (0u64, 0u64);
    unsafe {
        assert_eq!(gl_generate_cfg(m, 7, 1, 7.5, a.as_mut_ptr(), 2, &mut na), GlStatus::Ok);
        assert_eq!(gl_generate_ag(m, 7, 1, 7.5, 1.5, b.as_mut_ptr(), 2, &mut nb), GlStatus::Ok);
        gl_model_free(m);
    }
    assert_eq!(na, 40);
    assert_eq!(nb, 40);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn policy_generation_and_nfe() {
    let m = ring(2);
    let json = CString::new(r#"["cfg:7.5","cond","cond"]"#).unwrap();
    let mut x = [0.0; 2];
    let mut nfe = 0;
    unsafe {
        assert_eq!(gl_policy_nfe(json.as_ptr()), 3);
        assert_eq!(gl_generate_policy(m, json.as_ptr(), 0, 0, x.as_mut_ptr(), 2, &mut nfe), GlStatus::Ok);
        let short = CString::new(r#"["cond","cond"]"#).unwrap();
        assert!(gl_policy_nfe(short.as_ptr()) < 0);
        gl_model_free(m);
    }
    assert_eq!(nfe, 3);
}

#[test]
fn buffer_and_null_errors() {
    let m = ring(4);
    let mut x = [0.0; 1];
    unsafe {
        assert_eq!(gl_generate_cfg(m, 0, 0, 7.5, x.as_mut_ptr(), 1, ptr::null_mut()), GlStatus::BufferTooSmall);
        assert_eq!(gl_generate_cfg(m, 0, 0, 7.5, ptr::null_mut(), 2, ptr::null_mut()), GlStatus::NullPointer);
        assert_eq!(gl_generate_cfg(ptr::null(), 0, 0, 7.5, x.as_mut_ptr(), 1, ptr::null_mut()), GlStatus::NullPointer);
        let mut out = [0.0; 2];
        assert_eq!(gl_generate_cfg(m, 0, 5, 7.5, out.as_mut_ptr(), 2, ptr::null_mut()), GlStatus::InvalidArgument);
        assert!(last_error().contains("class"));
        gl_model_free(m);
    }
}

#[test]
fn combination_primitives() {
    let u = [1.0, -2.0, 0.5];
    let c = [0.5, 1.0, 2.0];
    let mut out = [0.0; 3];
    unsafe {
        assert_eq!(gl_cfg_score(u.as_ptr(), c.as_ptr(), 3, 1.0, out.as_mut_ptr()), GlStatus::Ok);
        assert_eq!(out, c);
        assert_eq!(gl_cfg_score(u.as_ptr(), c.as_ptr(), 3, 0.0, out.as_mut_ptr()), GlStatus::Ok);
        assert_eq!(out, u);
        let mut g = 0.0;
        assert_eq!(gl_cosine_gamma(c.as_ptr(), c.as_ptr(), 3, &mut g), GlStatus::Ok);
        assert!((g - 1.0).abs() < 1e-15);
        let z = [0.0; 3];
        assert_eq!(gl_cosine_gamma(z.as_ptr(), c.as_ptr(), 3, &mut g), GlStatus::Numerical);
    }
}

#[test]
fn eval_score_checks_step_range() {
    let m = ring(20);
    let x = [0.3, -1.2];
    let mut e = [0.0; 2];
    unsafe {
        assert_eq!(gl_eval_score(m, x.as_ptr(), 2, 20, -1, e.as_mut_ptr()), GlStatus::Ok);
        assert_eq!(gl_eval_score(m, x.as_ptr(), 2, 21, -1, e.as_mut_ptr()), GlStatus::InvalidArgument);
        gl_model_free(m);
    }
}

#[test]
fn header_declares_api_and_compiles_as_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/guidance_lab.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "gl_model_new_preset",
        "gl_model_load_mlp",
        "gl_model_free",
        "gl_generate_cfg",
        "gl_generate_ag",
        "gl_cfg_score",
        "gl_cosine_gamma",
        "gl_policy_nfe",
        "gl_last_error_message",
        "typedef struct GlModel GlModel",
        "GL_STATUS_MISSING_ARTIFACT = -3",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"guidance_lab.h\"\nint main(void) { GlModel *m = gl_model_new_preset(\"ring\", 0, 20); gl_model_free(m); return 0; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .expect("a C compiler on PATH");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
