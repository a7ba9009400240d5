use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use fedhead_ffi::*;

fn zeros(e: u32, c: u32) -> *mut FhHead {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fh_head_new_zeros(e, c, &mut h) }, FhStatus::Ok);
    h
}

fn random(e: u32, c: u32, seed: u64) -> *mut FhHead {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fh_head_new_random(e, c, seed, &mut h) }, FhStatus::Ok);
    h
}

fn params(h: *const FhHead, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n];
    assert_eq!(unsafe { fh_head_params(h, out.as_mut_ptr(), n) }, FhStatus::Ok);
    out
}

fn encode(h: *const FhHead) -> Vec<u8> {
    let mut written = 0usize;
    let mut buf = vec![0u8; 4096];
    assert_eq!(
        unsafe { fh_head_encode(h, buf.as_mut_ptr(), buf.len(), &mut written) },
        FhStatus::Ok
    );
    buf.truncate(written);
    buf
}

#[test]
fn sizes() {
    assert_eq!(fh_param_count(256, 2), 514);
    assert_eq!(fh_footprint_bytes(256, 2), 2056);
    assert_eq!(fh_encoded_len(256, 2), 2072);
    assert_eq!(fh_framed_len(256, 2), 518 * 8);
    assert_eq!(fh_param_count(1280, 2), 2562);
}

#[test]
fn zero_head_is_uniform_and_predicts_class_zero() {
    let h = zeros(4, 3);
    let x = [1.0f32, -2.0, 0.5, 3.0];
    let mut probs = [0.0f32; 3];
    unsafe {
        assert_eq!(fh_head_forward(h, x.as_ptr(), 4, probs.as_mut_ptr(), 3), FhStatus::Ok);
        let mut label = 9u32;
        assert_eq!(fh_head_predict(h, x.as_ptr(), 4, &mut label), FhStatus::Ok);
        assert_eq!(label, 0);
        let (mut e, mut c) = (0u32, 0u32);
        assert_eq!(fh_head_shape(h, &mut e, &mut c), FhStatus::Ok);
        assert_eq!((e, c), (4, 3));
        fh_head_free(h);
    }
    assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-7));
}

#[test]
fn training_moves_prediction_towards_label() {
    let h = zeros(2, 2);
    let xs = [1.0f32, 0.0, 0.0, 1.0];
    let ys = [1u32, 0];
    unsafe {
        assert_eq!(
            fh_head_train_batch(h, xs.as_ptr(), ys.as_ptr(), 2, 0.5, 20),
            FhStatus::Ok
        );
        let mut label = 0u32;
        fh_head_predict(h, xs.as_ptr(), 2, &mut label);
        assert_eq!(label, 1);
        fh_head_predict(h, xs[2..].as_ptr(), 2, &mut label);
        assert_eq!(label, 0);
        fh_head_free(h);
    }
}

#[test]
fn failed_training_leaves_head_unchanged() {
    let h = random(3, 2, 4);
    let before = params(h, 8);
    let xs = [1.0f32; 6];
    let bad_labels = [0u32, 5];
    unsafe {
        assert_eq!(
            fh_head_train_batch(h, xs.as_ptr(), bad_labels.as_ptr(), 2, 0.1, 1),
            FhStatus::Label
        );
        assert_eq!(
            fh_head_train_batch(h, xs.as_ptr(), [0u32, 1].as_ptr(), 2, f64::NAN, 1),
            FhStatus::Usage
        );
        assert_eq!(
            fh_head_train_batch(h, xs.as_ptr(), [0u32].as_ptr(), 0, 0.1, 1),
            FhStatus::Usage
        );
        assert_eq!(
            fh_head_train_batch(h, xs.as_ptr(), [0u32, 1].as_ptr(), 2, 0.1, 0),
            FhStatus::Usage
        );
        let huge = [f32::MAX; 6];
        assert_eq!(
            fh_head_train_batch(h, huge.as_ptr(), [0u32, 1].as_ptr(), 2, 1e300, 1),
            FhStatus::Numeric
        );
    }
    assert_eq!(params(h, 8), before);
    unsafe { fh_head_free(h) };
}

#[test]
fn encode_decode_round_trip() {
    let h = random(256, 2, 7);
    let bytes = encode(h);
    assert_eq!(bytes.len(), 2072);
    assert_eq!(&bytes[..4], b"FTL1");
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(fh_head_decode(bytes.as_ptr(), bytes.len(), &mut back), FhStatus::Ok);
    }
    assert_eq!(params(back, 514), params(h, 514));

    let mut framed = vec![0u8; fh_framed_len(256, 2)];
    let mut written = 0;
    let mut again = ptr::null_mut();
    unsafe {
        assert_eq!(
            fh_head_encode_framed(h, framed.as_mut_ptr(), framed.len(), &mut written),
            FhStatus::Ok
        );
        assert_eq!(written, framed.len());
        assert_eq!(
            fh_head_decode_framed(framed.as_ptr(), written, &mut again),
            FhStatus::Ok
        );
    }
    assert_eq!(params(again, 514), params(h, 514));
    unsafe {
        fh_head_free(h);
        fh_head_free(back);
        fh_head_free(again);
    }
}

#[test]
fn decode_errors_map_to_status() {
    let h = random(3, 2, 1);
    let good = encode(h);
    let mut out = ptr::null_mut();
    unsafe {
        let mut bad = good.clone();
        bad[20] ^= 0x01;
        assert_eq!(fh_head_decode(bad.as_ptr(), bad.len(), &mut out), FhStatus::Corrupt);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(fh_head_decode(bad.as_ptr(), bad.len(), &mut out), FhStatus::BadMagic);
        assert_eq!(
            fh_head_decode(good.as_ptr(), good.len() - 1, &mut out),
            FhStatus::Truncated
        );
        assert_eq!(fh_head_decode(good.as_ptr(), 0, &mut out), FhStatus::Truncated);
        assert_eq!(
            fh_head_decode_framed(good.as_ptr(), good.len(), &mut out),
            FhStatus::Encoding
        );
        fh_head_free(h);
    }
    assert!(out.is_null());
}

#[test]
fn encode_reports_required_size() {
    let h = zeros(4, 2);
    let mut small = [0u8; 8];
    let mut written = 0usize;
    unsafe {
        assert_eq!(
            fh_head_encode(h, small.as_mut_ptr(), small.len(), &mut written),
            FhStatus::BufferTooSmall
        );
        assert_eq!(written, fh_encoded_len(4, 2));
        assert_eq!(
            fh_head_encode(h, ptr::null_mut(), 0, &mut written),
            FhStatus::BufferTooSmall
        );
        fh_head_free(h);
    }
}

#[test]
fn average_matches_elementwise_mean() {
    let a = random(3, 2, 1);
    let b = random(3, 2, 2);
    let mut avg = ptr::null_mut();
    unsafe {
        assert_eq!(
            fh_heads_average([a as *const FhHead, b].as_ptr(), 2, &mut avg),
            FhStatus::Ok
        );
    }
    let (pa, pb, pm) = (params(a, 8), params(b, 8), params(avg, 8));
    for i in 0..8 {
        assert!((pm[i] - (pa[i] + pb[i]) / 2.0).abs() < 1e-6);
    }
    let c = zeros(4, 2);
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(
            fh_heads_average([a as *const FhHead, c].as_ptr(), 2, &mut out),
            FhStatus::Shape
        );
        assert_eq!(fh_heads_average(ptr::null(), 0, &mut out), FhStatus::Usage);
        assert_eq!(
            fh_heads_average([a as *const FhHead, ptr::null()].as_ptr(), 2, &mut out),
            FhStatus::NullPointer
        );
        for h in [a, b, avg, c] {
            fh_head_free(h);
        }
    }
}

#[test]
fn null_and_shape_arguments() {
    let h = zeros(3, 2);
    let x = [0.0f32; 3];
    let mut probs = [0.0f32; 2];
    let mut label = 0u32;
    unsafe {
        assert_eq!(fh_head_new_zeros(3, 2, ptr::null_mut()), FhStatus::NullPointer);
        assert_eq!(fh_head_new_zeros(0, 2, &mut ptr::null_mut()), FhStatus::Usage);
        assert_eq!(
            fh_head_forward(ptr::null(), x.as_ptr(), 3, probs.as_mut_ptr(), 2),
            FhStatus::NullPointer
        );
        assert_eq!(
            fh_head_forward(h, x.as_ptr(), 2, probs.as_mut_ptr(), 2),
            FhStatus::Shape
        );
        assert_eq!(
            fh_head_forward(h, x.as_ptr(), 3, probs.as_mut_ptr(), 3),
            FhStatus::Shape
        );
        assert_eq!(fh_head_predict(h, ptr::null(), 3, &mut label), FhStatus::NullPointer);
        assert_eq!(
            fh_head_predict(h, x.as_ptr(), 3, ptr::null_mut()),
            FhStatus::NullPointer
        );
        assert_eq!(
            fh_head_shape(h, ptr::null_mut(), ptr::null_mut()),
            FhStatus::NullPointer
        );
        fh_head_free(ptr::null_mut());
        fh_head_free(h);
    }
}

#[test]
fn status_strings_are_nul_terminated() {
    for s in [FhStatus::Ok, FhStatus::Corrupt, FhStatus::Panic, FhStatus::Internal] {
        let text = unsafe { CStr::from_ptr(fh_status_str(s)) }.to_str().unwrap();
        assert!(!text.is_empty());
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "fedhead.h"

int main(void) {
    FhHead *h = NULL;
    if (fh_head_new_random(256, 2, 7, &h) != FH_STATUS_OK) return 1;
    float x[256];
    for (int i = 0; i < 256; i++) x[i] = (float)(i % 7) / 7.0f;
    unsigned int y = 1;
    if (fh_head_train_batch(h, x, &y, 1, 0.01, 20) != FH_STATUS_OK) return 2;
    unsigned char buf[2072];
    size_t n = 0;
    if (fh_head_encode(h, buf, sizeof buf, &n) != FH_STATUS_OK || n != 2072) return 3;
    FhHead *back = NULL;
    if (fh_head_decode(buf, n, &back) != FH_STATUS_OK) return 4;
    buf[100] ^= 0x10;
    FhHead *bad = NULL;
    if (fh_head_decode(buf, n, &bad) != FH_STATUS_CORRUPT) return 5;
    uint32_t label = 0;
    if (fh_head_predict(back, x, 256, &label) != FH_STATUS_OK) return 6;
    printf("%u %s\n", label, fh_status_str(FH_STATUS_CORRUPT));
    fh_head_free(h);
    fh_head_free(back);
    return 0;
}
"#;

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_staticlib() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    let lib = profile_dir.join("libfedhead_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("run cc");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.ends_with("checksum mismatch\n"), "{stdout}");
}
