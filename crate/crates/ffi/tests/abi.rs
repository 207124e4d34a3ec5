use std::ffi::{c_char, CStr, CString};
use std::ptr;

use fcil_ffi::*;

const SMALL: &str = r#"
seed = 17
dataset = "synthetic"
partition = "quantity"
num_classes = 6
input_dim = 5
feature_dim = 4
per_class = 15
tasks = 2
clients = 3
alpha = 2
rounds = 2
local_epochs = 1
batch_size = 16
lr_lora = 0.01
lr_prototypes = 0.05
"#;

fn last_error() -> String {
    let mut need = 0usize;
    unsafe {
        assert_eq!(fcil_last_error(ptr::null_mut(), 0, &mut need), FcilStatus::Ok);
        let mut buf = vec![0 as c_char; need];
        assert_eq!(fcil_last_error(buf.as_mut_ptr(), need, ptr::null_mut()), FcilStatus::Ok);
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn small_config() -> *mut FcilConfig {
    let text = CString::new(SMALL).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { fcil_config_from_toml(text.as_ptr(), &mut cfg) }, FcilStatus::Ok);
    assert!(!cfg.is_null());
    cfg
}

fn record_json(exp: *const FcilExperiment) -> String {
    unsafe {
        let mut need = 0usize;
        assert_eq!(fcil_experiment_record_json(exp, ptr::null_mut(), 0, &mut need), FcilStatus::Ok);
        let mut small = [0 as c_char; 4];
        assert_eq!(
            fcil_experiment_record_json(exp, small.as_mut_ptr(), small.len(), ptr::null_mut()),
            FcilStatus::BufferTooSmall
        );
        assert!(last_error().contains("needed"));
        let mut buf = vec![0 as c_char; need];
        assert_eq!(fcil_experiment_record_json(exp, buf.as_mut_ptr(), need, ptr::null_mut()), FcilStatus::Ok);
        CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_owned()
    }
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(fcil_config_from_toml(ptr::null(), &mut cfg), FcilStatus::NullArgument);
        assert!(cfg.is_null());
        assert_eq!(fcil_experiment_run(ptr::null(), ptr::null_mut()), FcilStatus::NullArgument);
        assert!(!last_error().is_empty());
        fcil_config_free(ptr::null_mut());
        fcil_experiment_free(ptr::null_mut());
    }
}

#[test]
fn config_errors_map_to_config_status() {
    unsafe {
        let bad = CString::new("seed = 1\n").unwrap();
        let mut cfg = ptr::null_mut();
        assert_eq!(fcil_config_from_toml(bad.as_ptr(), &mut cfg), FcilStatus::Config);
        assert!(last_error().contains("dataset") || last_error().contains("partition"));

        let cfg = small_config();
        let kv = CString::new("eta=-1").unwrap();
        assert_eq!(fcil_config_set(cfg, kv.as_ptr()), FcilStatus::Config);
        assert!(last_error().contains("eta"));
        let kv = CString::new("rounds=3").unwrap();
        assert_eq!(fcil_config_set(cfg, kv.as_ptr()), FcilStatus::Ok);
        assert_eq!(last_error(), "");

        let mut need = 0;
        assert_eq!(fcil_config_to_toml(cfg, ptr::null_mut(), 0, &mut need), FcilStatus::Ok);
        let mut buf = vec![0 as c_char; need];
        assert_eq!(fcil_config_to_toml(cfg, buf.as_mut_ptr(), need, ptr::null_mut()), FcilStatus::Ok);
        let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        let parsed = fcil_core::config::ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(parsed.rounds, 3);
        fcil_config_free(cfg);
    }
}

#[test]
fn invalid_utf8_is_reported() {
    let bytes = [0xffu8, 0xfe, 0];
    let mut cfg = ptr::null_mut();
    let s = unsafe { fcil_config_from_toml(bytes.as_ptr().cast(), &mut cfg) };
    assert_eq!(s, FcilStatus::InvalidUtf8);
}

#[test]
fn run_matches_core_and_is_deterministic() {
    let cfg = small_config();
    unsafe {
        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(fcil_experiment_run(cfg, &mut a), FcilStatus::Ok);
        assert_eq!(fcil_experiment_run(cfg, &mut b), FcilStatus::Ok);
        let json = record_json(a);
        assert_eq!(json, record_json(b));

        let core = fcil_core::federation::run_experiment(
            &fcil_core::config::ExperimentConfig::from_toml(SMALL).unwrap(),
        )
        .unwrap();
        assert_eq!(json, core.record.to_json());

        let mut stages = 0;
        assert_eq!(fcil_experiment_stage_count(a, &mut stages), FcilStatus::Ok);
        assert_eq!(stages, 2);
        let (mut a_n, mut avg) = (0.0, 0.0);
        assert_eq!(fcil_experiment_summary(a, &mut a_n, &mut avg), FcilStatus::Ok);
        assert_eq!(Some(a_n), core.record.a_n);
        assert_eq!(Some(avg), core.record.avg);

        let mut acc = -1.0;
        assert_eq!(fcil_experiment_accuracy(a, 1, 0, &mut acc), FcilStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(fcil_experiment_accuracy(a, 0, 1, &mut acc), FcilStatus::OutOfRange);
        assert_eq!(fcil_experiment_accuracy(a, 5, 0, &mut acc), FcilStatus::OutOfRange);

        fcil_experiment_free(a);
        fcil_experiment_free(b);
        fcil_config_free(cfg);
    }
}

#[test]
fn run_to_dir_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = CString::new(tmp.path().join("run").to_str().unwrap()).unwrap();
    let cfg = small_config();
    unsafe {
        assert_eq!(fcil_experiment_run_to_dir(cfg, dir.as_ptr()), FcilStatus::Ok);
        fcil_config_free(cfg);
    }
    for f in ["config.toml", "record.json", "metrics.csv", "checkpoints/stage_2.ckpt"] {
        assert!(tmp.path().join("run").join(f).exists(), "missing {f}");
    }
}

#[test]
fn reweight_matches_independent_oracle() {
    // Three clients, two dims. Oracle: d_k = sum_i |p_k - mu_i|^2, score 1/d,
    // min-max normalize, softmax(eta * score).
    let protos: [f64; 6] = [1.0, 0.0, 0.0, 2.0, -1.0, -1.0];
    let means: [f64; 6] = [1.0, 0.5, 0.0, 0.0, 0.5, 1.0];
    let eta = 0.7;
    let k = 3;
    let d: Vec<f64> = (0..k)
        .map(|p| {
            (0..k)
                .map(|i| (0..2).map(|j| (protos[p * 2 + j] - means[i * 2 + j]).powi(2)).sum::<f64>())
                .sum()
        })
        .collect();
    let inv: Vec<f64> = d.iter().map(|x| 1.0 / x).collect();
    let (lo, hi) = inv.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let e: Vec<f64> = inv.iter().map(|v| (eta * (v - lo) / (hi - lo)).exp()).collect();
    let z: f64 = e.iter().sum();
    let want_w: Vec<f64> = e.iter().map(|x| x / z).collect();
    let want_p: Vec<f64> = (0..2).map(|j| (0..k).map(|p| want_w[p] * protos[p * 2 + j]).sum()).collect();

    let mut w = [0.0; 3];
    let mut p = [0.0; 2];
    let s = unsafe { fcil_prototype_reweight(k, 2, protos.as_ptr(), means.as_ptr(), eta, w.as_mut_ptr(), p.as_mut_ptr()) };
    assert_eq!(s, FcilStatus::Ok);
    for (a, b) in w.iter().zip(&want_w) {
        assert!((a - b).abs() < 1e-12, "{w:?} vs {want_w:?}");
    }
    for (a, b) in p.iter().zip(&want_p) {
        assert!((a - b).abs() < 1e-12, "{p:?} vs {want_p:?}");
    }

    let s = unsafe { fcil_prototype_reweight(k, 2, protos.as_ptr(), means.as_ptr(), 0.0, w.as_mut_ptr(), p.as_mut_ptr()) };
    assert_eq!(s, FcilStatus::Config);
    let s = unsafe { fcil_prototype_reweight(0, 2, protos.as_ptr(), means.as_ptr(), eta, w.as_mut_ptr(), p.as_mut_ptr()) };
    assert_eq!(s, FcilStatus::OutOfRange);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(fcil_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
