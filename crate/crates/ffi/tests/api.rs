use std::ffi::{CStr, CString};
use std::ptr;

use shiftconv_ffi::*;

const TINY: &str = "image_channels = 1
feat_channels = 2, 2, 2, 2
redir_channels = 2
encode_channels = 2, 2, 2, 2
decode_channels = 2, 2, 2, 2, 2, 2
maxdisp = 2
clue_filters = 2
synth_channels = 1
";

fn last_error() -> String {
    unsafe { CStr::from_ptr(sc_last_error()) }.to_string_lossy().into_owned()
}

fn new_model(text: &str) -> *mut ScModel {
    let cfg = CString::new(text).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sc_model_new(cfg.as_ptr(), 7, &mut m) }, ScStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

#[test]
fn version_and_schedule() {
    assert_eq!(sc_abi_version(), SC_ABI_VERSION);
    assert_eq!(sc_lr_schedule(0, 2e-4), 2e-4);
    assert_eq!(sc_lr_schedule(150_000, 2e-4), 5e-5);
    assert_eq!(sc_lr_schedule(300_000, 2e-4), 3e-5);
}

#[test]
fn null_pointers_are_reported_not_dereferenced() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sc_model_load(ptr::null(), &mut m) }, ScStatus::NullPointer);
    assert!(last_error().contains("path"), "{}", last_error());
    assert_eq!(unsafe { sc_model_new(ptr::null(), 0, &mut m) }, ScStatus::NullPointer);
    let mut out = 0.0;
    assert_eq!(unsafe { sc_epe(ptr::null(), ptr::null(), 1, 1, &mut out) }, ScStatus::NullPointer);
    assert_eq!(unsafe { sc_model_info(ptr::null(), ptr::null_mut()) }, ScStatus::NullPointer);
    unsafe { sc_model_free(ptr::null_mut()) };
}

#[test]
fn bad_config_and_missing_file_map_to_status_codes() {
    let cfg = CString::new("warp_speed = 9").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sc_model_new(cfg.as_ptr(), 0, &mut m) }, ScStatus::Config);
    assert!(last_error().contains("unknown key"), "{}", last_error());

    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { sc_model_load(path.as_ptr(), &mut m) }, ScStatus::Io);
    assert!(m.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"SCNC\x01").unwrap();
    let path = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sc_model_load(path.as_ptr(), &mut m) }, ScStatus::Checkpoint);
}

#[test]
fn metrics_match_hand_values() {
    let gt = [10.0f32; 4];
    let pred = [10.0f32, 12.0, 14.0, 5.0];
    let (mut e, mut d) = (0.0, 0.0);
    unsafe {
        assert_eq!(sc_epe(pred.as_ptr(), gt.as_ptr(), 2, 2, &mut e), ScStatus::Ok);
        assert_eq!(sc_d1(pred.as_ptr(), gt.as_ptr(), 2, 2, 3.0, &mut d), ScStatus::Ok);
    }
    assert_eq!((e, d), (2.75, 0.5));
    let none = [f32::NAN; 4];
    assert_eq!(unsafe { sc_epe(pred.as_ptr(), none.as_ptr(), 2, 2, &mut e) }, ScStatus::InvalidArgument);
}

#[test]
fn infer_save_and_reload_agree() {
    let m = new_model(TINY);
    let mut info = ScModelInfo::default();
    assert_eq!(unsafe { sc_model_info(m, &mut info) }, ScStatus::Ok);
    assert_eq!((info.image_channels, info.maxdisp, info.size_multiple), (1, 2, 64));
    assert!(info.param_tensors > 0 && info.param_values > 0);

    let (w, h) = (128u32, 64u32);
    let n = (w * h) as usize;
    let (mut l, mut r, mut gt) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    let st = unsafe { sc_synth_pair(w, h, 1, 3, l.as_mut_ptr(), r.as_mut_ptr(), gt.as_mut_ptr()) };
    assert_eq!(st, ScStatus::Ok, "{}", last_error());
    assert!(gt.iter().all(|d| d.is_finite()));

    let mut a = vec![0.0f32; n];
    assert_eq!(unsafe { sc_model_infer(m, l.as_ptr(), r.as_ptr(), 1, h, w, a.as_mut_ptr()) }, ScStatus::Ok);
    assert!(a.iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sc_model_save(m, path.as_ptr()) }, ScStatus::Ok, "{}", last_error());
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { sc_model_load(path.as_ptr(), &mut m2) }, ScStatus::Ok, "{}", last_error());
    let mut b = vec![0.0f32; n];
    assert_eq!(unsafe { sc_model_infer(m2, l.as_ptr(), r.as_ptr(), 1, h, w, b.as_mut_ptr()) }, ScStatus::Ok);
    assert_eq!(a, b);

    // 100 is not a multiple of 64
    let st = unsafe { sc_model_infer(m, l.as_ptr(), r.as_ptr(), 1, 64, 100, b.as_mut_ptr()) };
    assert_eq!(st, ScStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    unsafe {
        sc_model_free(m);
        sc_model_free(m2);
    }
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/shiftconv.h")).unwrap();
    for sym in ["sc_model_load", "sc_model_infer", "sc_model_free", "sc_last_error", "SC_STATUS_NULL_POINTER", "ScModelInfo"] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}
