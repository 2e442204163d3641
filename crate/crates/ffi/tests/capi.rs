use std::ffi::{CStr, CString};
use std::ptr;

use egal_ffi::*;

fn last_error() -> String {
    let p = egal_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_classifier(seed: u64) -> *mut EgalClassifier {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { egal_classifier_new(3, seed, &mut h) }, EgalStatus::Ok);
    assert!(!h.is_null());
    h
}

fn blob(size: usize) -> (Vec<f64>, Vec<f64>) {
    let mut img = vec![0.05; size * size];
    let mut mask = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            if (r as f64 - 10.0).powi(2) + (c as f64 - 9.0).powi(2) < 16.0 {
                img[r * size + c] = 0.8;
                mask[r * size + c] = 1.0;
            }
        }
    }
    (img, mask)
}

#[test]
fn formulas() {
    let mut out = 0.0;
    let p = [0.7, 0.2, 0.1];
    assert_eq!(unsafe { egal_entropy(p.as_ptr(), 3, &mut out) }, EgalStatus::Ok);
    assert!((out - 0.80182).abs() < 1e-5);
    let u = [0.25; 4];
    assert_eq!(unsafe { egal_normalized_entropy(u.as_ptr(), 4, &mut out) }, EgalStatus::Ok);
    assert!((out - 1.0).abs() < 1e-12);
    let a = [0.5, 1.0, 0.0, 0.0];
    let b = [1.0, 1.0, 0.0, 0.0];
    assert_eq!(unsafe { egal_dice(a.as_ptr(), b.as_ptr(), 4, &mut out) }, EgalStatus::Ok);
    assert!((out - 0.85714).abs() < 1e-5);
    assert_eq!(unsafe { egal_composite_score(1.0, 0.6, 0.5, &mut out) }, EgalStatus::Ok);
    assert!((out - 0.8).abs() < 1e-12);
}

#[test]
fn errors_set_status_and_message() {
    let mut out = 0.0;
    let bad = [0.5, 0.6];
    assert_eq!(unsafe { egal_entropy(bad.as_ptr(), 2, &mut out) }, EgalStatus::Contract);
    assert!(last_error().contains("contract"));
    assert_eq!(unsafe { egal_entropy(ptr::null(), 2, &mut out) }, EgalStatus::NullPointer);
    assert!(last_error().contains("probs"));
    assert_eq!(unsafe { egal_composite_score(0.5, 0.5, 1.5, &mut out) }, EgalStatus::Contract);

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { egal_classifier_new(1, 0, &mut h) }, EgalStatus::Config);
    assert!(h.is_null());
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { egal_classifier_load(missing.as_ptr(), &mut h) }, EgalStatus::Data);

    // a successful call clears the message
    assert_eq!(unsafe { egal_composite_score(0.5, 0.5, 0.5, &mut out) }, EgalStatus::Ok);
    assert!(egal_last_error().is_null());
}

#[test]
fn prediction_cam_and_misalignment() {
    let h = new_classifier(7);
    assert_eq!(unsafe { egal_classifier_num_classes(h) }, 3);
    let (img, mask) = blob(16);
    let mut probs = [0.0; 3];
    assert_eq!(unsafe { egal_predict_proba(h, img.as_ptr(), 16, 16, probs.as_mut_ptr(), 3) }, EgalStatus::Ok);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut small = [0.0; 2];
    assert_eq!(
        unsafe { egal_predict_proba(h, img.as_ptr(), 16, 16, small.as_mut_ptr(), 2) },
        EgalStatus::Contract
    );

    let mut cam = vec![0.0; 256];
    assert_eq!(unsafe { egal_grad_cam(h, img.as_ptr(), 16, 16, 1, cam.as_mut_ptr()) }, EgalStatus::Ok);
    assert!(cam.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(unsafe { egal_grad_cam(h, img.as_ptr(), 16, 16, 3, cam.as_mut_ptr()) }, EgalStatus::Contract);

    let (mut d, mut k) = (0.0, 99usize);
    assert_eq!(
        unsafe { egal_misalignment(h, img.as_ptr(), mask.as_ptr(), 16, 16, &mut d, &mut k) },
        EgalStatus::Ok
    );
    assert!((0.0..=1.0).contains(&d));
    let best = probs.iter().enumerate().fold(0, |b, (i, p)| if *p > probs[b] { i } else { b });
    assert_eq!(k, best);

    // predicted-class CAM through the C API agrees with the misalignment call
    let mut own = vec![0.0; 256];
    assert_eq!(unsafe { egal_grad_cam(h, img.as_ptr(), 16, 16, k, own.as_mut_ptr()) }, EgalStatus::Ok);
    let mut dc = 0.0;
    assert_eq!(unsafe { egal_dice(own.as_ptr(), mask.as_ptr(), 256, &mut dc) }, EgalStatus::Ok);
    assert!((1.0 - dc - d).abs() < 1e-12);
    unsafe { egal_classifier_free(h) };
}

#[test]
fn prototypes_switch_the_head() {
    let h = new_classifier(3);
    let dim = unsafe { egal_classifier_embed_dim(h) };
    let (img, _) = blob(16);
    let mut probs = [0.0; 3];
    let c0 = vec![0.0; dim];
    assert_eq!(unsafe { egal_classifier_set_prototype(h, 0, c0.as_ptr(), dim) }, EgalStatus::Ok);
    // class 1 and 2 still lack centroids
    assert_eq!(
        unsafe { egal_predict_proba(h, img.as_ptr(), 16, 16, probs.as_mut_ptr(), 3) },
        EgalStatus::Contract
    );
    assert!(last_error().contains("prototype"));
    let far = vec![100.0; dim];
    for k in 1..3 {
        assert_eq!(unsafe { egal_classifier_set_prototype(h, k, far.as_ptr(), dim) }, EgalStatus::Ok);
    }
    assert_eq!(unsafe { egal_predict_proba(h, img.as_ptr(), 16, 16, probs.as_mut_ptr(), 3) }, EgalStatus::Ok);
    assert!(probs[0] > 0.99, "{probs:?}");
    assert_eq!(
        unsafe { egal_classifier_set_prototype(h, 0, c0.as_ptr(), dim - 1) },
        EgalStatus::Contract
    );
    unsafe { egal_classifier_free(h) };
    unsafe { egal_classifier_free(ptr::null_mut()) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/egal.h")).unwrap();
    for name in [
        "egal_last_error",
        "egal_classifier_new",
        "egal_classifier_load",
        "egal_classifier_free",
        "egal_classifier_set_prototype",
        "egal_entropy",
        "egal_dice",
        "egal_composite_score",
        "egal_predict_proba",
        "egal_grad_cam",
        "egal_misalignment",
        "EGAL_STATUS_CONTRACT",
        "typedef struct EgalClassifier EgalClassifier",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn loads_a_checkpoint_written_by_the_core() {
    use egal::model::{save_checkpoint, Architecture, Classifier, Head, SmallCnn};
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    let c = Classifier::new(SmallCnn::new(Architecture::default(), 11).unwrap(), Head::Linear);
    save_checkpoint(&c, &path).unwrap();
    let (img, _) = blob(16);
    let want = c.predict_proba(&egal::numeric::Tensor::new(&[1, 16, 16], img.clone()).unwrap()).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { egal_classifier_load(cpath.as_ptr(), &mut h) }, EgalStatus::Ok);
    let mut probs = [0.0; 3];
    assert_eq!(unsafe { egal_predict_proba(h, img.as_ptr(), 16, 16, probs.as_mut_ptr(), 3) }, EgalStatus::Ok);
    assert_eq!(probs.to_vec(), want);
    unsafe { egal_classifier_free(h) };
}

/// Compile and run a C program against the generated header and the cdylib.
#[test]
fn c_program_links_against_the_library() {
    // test builds leave the cdylib next to the test binary in deps/
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let has_lib = |d: &std::path::Path| {
        std::fs::read_dir(d)
            .map(|it| {
                it.flatten()
                    .any(|e| ["libegal_ffi.so", "libegal_ffi.dylib"].contains(&e.file_name().to_string_lossy().as_ref()))
            })
            .unwrap_or(false)
    };
    let lib_dir = [deps, deps.parent().unwrap()]
        .into_iter()
        .find(|d| has_lib(d))
        .expect("cdylib built alongside the tests")
        .to_path_buf();
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "egal.h"
int main(void) {
    double p[3] = {0.7, 0.2, 0.1}, h = 0.0;
    if (egal_entropy(p, 3, &h) != EGAL_STATUS_OK) return 1;
    EgalClassifier *c = NULL;
    if (egal_classifier_new(3, 1, &c) != EGAL_STATUS_OK) return 2;
    double img[256], probs[3];
    for (int i = 0; i < 256; i++) img[i] = (i % 17) / 17.0;
    if (egal_predict_proba(c, img, 16, 16, probs, 3) != EGAL_STATUS_OK) return 3;
    egal_classifier_free(c);
    if (egal_classifier_new(1, 1, &c) != EGAL_STATUS_CONFIG || egal_last_error() == NULL) return 4;
    printf("%.5f %.6f\n", h, probs[0] + probs[1] + probs[2]);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = tmp.path().join("smoke");
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = std::process::Command::new("cc")
        .arg(&src)
        .arg(format!("-I{include}"))
        .arg(format!("-L{}", lib_dir.display()))
        .arg("-legal_ffi")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.80182 1.000000");
}
