use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use ndarray::Array2;
use sae_ensemble::data::{generate_synthetic, write_dataset, CoeffDistribution, SyntheticDictionarySpec};
use sae_ensemble::ensemble::{Ensemble, EnsembleKind};
use sae_ensemble::sae::{save_checkpoint, Activation, CheckpointMeta, SaeParams};
use sae_ensemble_ffi::*;

fn params(seed: u64) -> SaeParams {
    SaeParams::init(4, 6, Activation::Topk { k: 2 }, 0.0, None, seed).unwrap()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn load(p: &Path) -> *mut SaeTarget {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sae_target_load(cpath(p).as_ptr(), &mut h) }, SaeStatus::Ok);
    assert!(!h.is_null());
    h
}

fn inputs() -> Array2<f64> {
    Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3 + 0.1)
}

#[test]
fn checkpoint_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.sae");
    let sae = params(3);
    save_checkpoint(&p, &sae, &CheckpointMeta::default()).unwrap();
    let h = load(&p);

    let (mut d, mut m, mut j) = (0, 0, 0);
    assert_eq!(unsafe { sae_target_shape(h, &mut d, &mut m, &mut j) }, SaeStatus::Ok);
    assert_eq!((d, m, j), (4, 6, 1));

    let x = inputs();
    let mut codes = vec![0.0; 3 * 6];
    let st = unsafe { sae_target_encode(h, x.as_ptr(), 3, 4, codes.as_mut_ptr(), codes.len()) };
    assert_eq!(st, SaeStatus::Ok);
    assert_eq!(codes, sae.encode_batch(x.view()).unwrap().into_raw_vec_and_offset().0);

    let mut recon = vec![0.0; 3 * 4];
    let st = unsafe { sae_target_reconstruct(h, x.as_ptr(), 3, 4, recon.as_mut_ptr(), recon.len()) };
    assert_eq!(st, SaeStatus::Ok);
    assert_eq!(recon, sae.reconstruct_batch(x.view()).unwrap().into_raw_vec_and_offset().0);
    unsafe { sae_target_free(h) };
}

#[test]
fn ensemble_directory_loads() {
    let dir = tempfile::tempdir().unwrap();
    let ens = Ensemble::new(EnsembleKind::Boosting, vec![params(1), params(2)], vec![1, 2]).unwrap();
    ens.save(dir.path(), None, None).unwrap();
    let h = load(dir.path());
    let (mut m, mut j) = (0, 0);
    assert_eq!(unsafe { sae_target_shape(h, ptr::null_mut(), &mut m, &mut j) }, SaeStatus::Ok);
    assert_eq!((m, j), (12, 2));
    let x = inputs();
    let mut recon = vec![0.0; 12];
    assert_eq!(unsafe { sae_target_reconstruct(h, x.as_ptr(), 3, 4, recon.as_mut_ptr(), 12) }, SaeStatus::Ok);
    let expect = ens.reconstruct_batch(x.view()).unwrap();
    for (a, b) in recon.iter().zip(expect.iter()) {
        assert_eq!(a, b);
    }
    unsafe { sae_target_free(h) };
}

#[test]
fn errors_set_status_and_message() {
    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.sae").unwrap();
    assert_eq!(unsafe { sae_target_load(missing.as_ptr(), &mut h) }, SaeStatus::Io);
    assert!(h.is_null());
    let msg = unsafe { CStr::from_ptr(sae_last_error()) }.to_str().unwrap();
    assert!(msg.contains("nonexistent"), "{msg}");

    assert_eq!(unsafe { sae_target_load(ptr::null(), &mut h) }, SaeStatus::NullPointer);
    assert_eq!(
        unsafe { sae_target_shape(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) },
        SaeStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("g.sae");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(unsafe { sae_target_load(cpath(&garbage).as_ptr(), &mut h) }, SaeStatus::Corrupt);

    let p = dir.path().join("m.sae");
    save_checkpoint(&p, &params(1), &CheckpointMeta::default()).unwrap();
    let h = load(&p);
    let x = [0.0; 6];
    let mut out = vec![0.0; 6];
    // wrong width
    assert_eq!(unsafe { sae_target_encode(h, x.as_ptr(), 2, 3, out.as_mut_ptr(), 12) }, SaeStatus::DimensionMismatch);
    // wrong output length
    let x = [0.0; 4];
    assert_eq!(unsafe { sae_target_encode(h, x.as_ptr(), 1, 4, out.as_mut_ptr(), 5) }, SaeStatus::DimensionMismatch);
    assert_eq!(unsafe { sae_target_encode(h, x.as_ptr(), 1, 4, out.as_mut_ptr(), 6) }, SaeStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(sae_last_error()) }.to_bytes(), b"");
    unsafe { sae_target_free(h) };
    unsafe { sae_target_free(ptr::null_mut()) };
}

#[test]
fn evaluate_returns_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDictionarySpec {
        dim: 4,
        true_feature_count: 6,
        active_per_sample: 2,
        coeff_distribution: CoeffDistribution::Uniform { low: 0.5, high: 1.0 },
        noise_std: 0.0,
        bias: vec![],
        seed: 5,
    };
    let ds = generate_synthetic(&spec, 50).unwrap().dataset;
    let manifest = write_dataset(&ds, dir.path(), "eval", 20, None).unwrap();
    let p = dir.path().join("m.sae");
    save_checkpoint(&p, &params(1), &CheckpointMeta::default()).unwrap();
    let h = load(&p);
    let taus = [0.3, 0.9];
    let mut json = ptr::null_mut();
    let st = unsafe { sae_target_evaluate_json(h, cpath(&manifest).as_ptr(), taus.as_ptr(), 2, &mut json) };
    assert_eq!(st, SaeStatus::Ok, "{:?}", unsafe { CStr::from_ptr(sae_last_error()) });
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    assert_eq!(v["N"], 50);
    assert_eq!(v["diversity"].as_array().unwrap().len(), 2);
    unsafe { sae_string_free(json) };
    unsafe { sae_target_free(h) };
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(sae_version()) }.to_str().unwrap();
    assert_eq!(v, sae_ensemble::VERSION);
}

#[test]
fn header_is_current_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sae_ensemble.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["sae_target_load", "sae_target_free", "sae_target_encode", "sae_target_evaluate_json", "SAE_STATUS_OK"]
    {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(status) =
        std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99"]).arg(&header).status()
    else {
        return;
    };
    assert!(status.success());
}
