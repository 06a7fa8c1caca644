use std::ffi::{CStr, CString};
use std::ptr;

use asgmamba::checkpoint::Checkpoint;
use asgmamba::data::{Scaler, Split};
use asgmamba::{AsgMamba, ModelConfig, Tensor};
use asgmamba_ffi::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        lookback: 32,
        horizon: 8,
        variates: 2,
        d_model: 8,
        patch_sizes: vec![8, 16],
        d_state: 4,
        ..ModelConfig::default()
    }
}

fn saved_checkpoint(dir: &tempfile::TempDir) -> (CString, Checkpoint) {
    let ckpt = Checkpoint {
        model: AsgMamba::new(tiny_config(), 3).unwrap(),
        scaler: Some(Scaler {
            mean: vec![10.0, -2.0],
            std: vec![2.0, 0.5],
            source: Split::Train,
        }),
    };
    let path = dir.path().join("m.asgm");
    ckpt.save(&path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), ckpt)
}

fn last_error() -> String {
    let p = asgm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_dims_forecast_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ckpt) = saved_checkpoint(&dir);
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { asgm_model_load(path.as_ptr(), &mut h) }, AsgmStatus::Ok);
    assert!(!h.is_null());
    assert!(asgm_last_error().is_null());

    let (mut l, mut t, mut m) = (0, 0, 0);
    assert_eq!(unsafe { asgm_model_dims(h, &mut l, &mut t, &mut m) }, AsgmStatus::Ok);
    assert_eq!((l, t, m), (32, 8, 2));
    let mut n = 0;
    assert_eq!(unsafe { asgm_model_param_count(h, &mut n) }, AsgmStatus::Ok);
    assert_eq!(n, ckpt.model.param_count());

    let input: Vec<f64> = (0..2 * 32 * 2).map(|i| 10.0 + (i as f64 * 0.3).sin()).collect();
    let mut out = vec![0.0; 2 * 8 * 2];
    let st = unsafe { asgm_model_forecast(h, input.as_ptr(), input.len(), 2, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, AsgmStatus::Ok);

    // same result through the library directly
    let scaler = ckpt.scaler.as_ref().unwrap();
    let mut x = input.clone();
    scaler.transform(&mut x);
    let mut want = ckpt
        .model
        .predict(&Tensor::new(vec![2, 32, 2], x).unwrap())
        .unwrap()
        .into_data();
    scaler.inverse(&mut want);
    assert_eq!(out, want);
    unsafe { asgm_model_free(h) };
}

#[test]
fn error_codes_and_messages() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { asgm_model_load(ptr::null(), &mut h) }, AsgmStatus::NullPointer);
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/model.asgm").unwrap();
    assert_eq!(unsafe { asgm_model_load(missing.as_ptr(), &mut h) }, AsgmStatus::Io);
    assert!(h.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.asgm");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { asgm_model_load(junk.as_ptr(), &mut h) }, AsgmStatus::Data);
    assert!(last_error().contains("ASGM1"));

    let (path, _) = saved_checkpoint(&dir);
    assert_eq!(unsafe { asgm_model_load(path.as_ptr(), &mut h) }, AsgmStatus::Ok);
    let input = [0.0; 10];
    let mut out = vec![0.0; 16];
    let st = unsafe { asgm_model_forecast(h, input.as_ptr(), input.len(), 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, AsgmStatus::Shape);
    let st = unsafe { asgm_model_forecast(ptr::null(), input.as_ptr(), 10, 1, out.as_mut_ptr(), 16) };
    assert_eq!(st, AsgmStatus::NullPointer);
    unsafe { asgm_model_free(h) };
    unsafe { asgm_model_free(ptr::null_mut()) };
}

#[test]
fn descriptor_through_abi() {
    let patch = [0.7; 16];
    let mut out = [9.0; 3];
    assert_eq!(
        unsafe { asgm_spectral_descriptor(patch.as_ptr(), 16, 3, out.as_mut_ptr()) },
        AsgmStatus::Ok
    );
    assert_eq!(out, [1.0, 0.0, 0.0]);
    assert_eq!(
        unsafe { asgm_spectral_descriptor(patch.as_ptr(), 12, 3, out.as_mut_ptr()) },
        AsgmStatus::InvalidArgument
    );
    assert!(last_error().contains("power of two"));
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(asgm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
