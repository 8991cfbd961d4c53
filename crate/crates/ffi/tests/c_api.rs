use std::ffi::{CStr, CString};
use std::ptr;

use multirep_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mr_last_error()) }.to_string_lossy().into_owned()
}

fn images(n: usize) -> Vec<f64> {
    (0..n * 784).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()
}

#[test]
fn classifier_round_trips_through_a_checkpoint() {
    let mut model: *mut MrClassifier = ptr::null_mut();
    assert_eq!(unsafe { mr_classifier_desk(3, &mut model) }, MrStatus::Ok);
    assert_eq!(unsafe { mr_classifier_num_classes(model) }, 10);
    assert!(unsafe { mr_classifier_param_count(model) } > 0);

    let x = images(2);
    let mut scores = vec![0.0; 20];
    assert_eq!(unsafe { mr_classifier_scores(model, x.as_ptr(), 2, scores.as_mut_ptr()) }, MrStatus::Ok);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mr_classifier_save(model, path.as_ptr()) }, MrStatus::Ok);
    let mut loaded: *mut MrClassifier = ptr::null_mut();
    assert_eq!(unsafe { mr_classifier_load(path.as_ptr(), &mut loaded) }, MrStatus::Ok);
    let mut again = vec![0.0; 20];
    assert_eq!(unsafe { mr_classifier_scores(loaded, x.as_ptr(), 2, again.as_mut_ptr()) }, MrStatus::Ok);
    assert_eq!(scores, again);

    let mut labels = [99usize; 2];
    assert_eq!(unsafe { mr_classifier_predict(loaded, x.as_ptr(), 2, labels.as_mut_ptr()) }, MrStatus::Ok);
    assert!(labels.iter().all(|&l| l < 10));

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut m: *mut MrClassifier = ptr::null_mut();
    assert_eq!(unsafe { mr_classifier_load(missing.as_ptr(), &mut m) }, MrStatus::Io);
    assert!(last_error().contains("none.ckpt"));
    unsafe {
        mr_classifier_free(model);
        mr_classifier_free(loaded);
    }
}

#[test]
fn dct_space_inverts_and_attacks_stay_in_range() {
    let mut space: *mut MrSpace = ptr::null_mut();
    assert_eq!(unsafe { mr_space_dct(28, 28, 1, &mut space) }, MrStatus::Ok);
    let x = images(1);
    let mut z = vec![0.0; 784];
    let mut back = vec![0.0; 784];
    unsafe {
        assert_eq!(mr_space_forward(space, 1, 28, 28, 1, x.as_ptr(), z.as_mut_ptr()), MrStatus::Ok);
        assert_eq!(mr_space_inverse(space, 1, 28, 28, 1, z.as_ptr(), back.as_mut_ptr()), MrStatus::Ok);
    }
    assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-10));

    let mut model: *mut MrClassifier = ptr::null_mut();
    assert_eq!(unsafe { mr_classifier_desk(1, &mut model) }, MrStatus::Ok);
    let mut adv = vec![0.0; 784];
    let status = unsafe { mr_attack(model, space, MrNorm::Linf, 0.05, 5, 1, 7, x.as_ptr(), [4usize].as_ptr(), 1, adv.as_mut_ptr()) };
    assert_eq!(status, MrStatus::Ok);
    assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));

    let status = unsafe { mr_attack(model, space, MrNorm::L2, -1.0, 5, 1, 7, x.as_ptr(), [4usize].as_ptr(), 1, adv.as_mut_ptr()) };
    assert_eq!(status, MrStatus::InvalidArgument);
    unsafe {
        mr_classifier_free(model);
        mr_space_free(space);
    }
}

#[test]
fn game_verification() {
    let mut game: *mut MrGame = ptr::null_mut();
    assert_eq!(unsafe { mr_game_new(2, 2, [0.0, 1.0, 1.0, 0.0].as_ptr(), 1.0, &mut game) }, MrStatus::Ok);
    assert_eq!(unsafe { mr_game_pure_minimax(game) }, 1.0);
    let mut r = MrMinimaxCheck::default();
    assert_eq!(unsafe { mr_game_verify_minimax(game, 0.1, 0.05, &mut r) }, MrStatus::Ok);
    assert!(r.pass && r.margin >= 0.0);
    assert_eq!(r.eta, 0.05);
    assert_eq!(unsafe { mr_game_verify_minimax(game, 0.1, -1.0, &mut r) }, MrStatus::InvalidArgument);
    unsafe { mr_game_free(game) };
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/multirep.h")).unwrap();
    let source = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}
