//! Drives the C entry points the way a foreign caller would: raw pointers,
//! status codes, and the thread-local error message.

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use cdistill::dist::{kl_divergence, TokenDistribution, Vocabulary};
use cdistill::models::KGramSoftmaxModel;
use cdistill::sampler::{contrast_target, masked_support};
use cdistill_ffi::*;

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(cd_last_error())
            .to_string_lossy()
            .into_owned()
    }
}

fn saved_model(dir: &Path) -> PathBuf {
    let vocab = Vocabulary::new(vec!["a".into(), "bb".into(), "c".into()]).unwrap();
    let lines = vec![vec![0, 1, 2], vec![0, 1, 1]];
    let model = KGramSoftmaxModel::fit(vocab, 2, &lines, 0.05).unwrap();
    let path = dir.join("m.json");
    model.save(&path).unwrap();
    path
}

fn load(path: &Path) -> *mut CdModel {
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { cd_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, CdStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

#[test]
fn missing_files_and_null_arguments_are_reported() {
    let c_path = CString::new("no/such/model.json").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { cd_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, CdStatus::Io);
    assert!(handle.is_null(), "failed load must not produce a handle");
    assert!(last_error().contains("no/such/model.json"), "{}", last_error());

    assert_eq!(
        unsafe { cd_model_load(ptr::null(), &mut handle) },
        CdStatus::NullArgument
    );
    assert_eq!(unsafe { cd_model_vocab_len(ptr::null()) }, 0);
    unsafe { cd_model_free(ptr::null_mut()) };
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(cd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_queries_round_trip_through_the_handle() {
    let dir = tempfile::tempdir().unwrap();
    let model = load(&saved_model(dir.path()));

    assert_eq!(unsafe { cd_model_vocab_len(model) }, 3);

    // Token text, including the undersized-buffer path.
    let mut buf = [0i8; 8];
    let mut written = 0usize;
    let status =
        unsafe { cd_model_token(model, 1, buf.as_mut_ptr().cast(), buf.len(), &mut written) };
    assert_eq!(status, CdStatus::Ok);
    assert_eq!(written, 2);
    let text = unsafe { CStr::from_ptr(buf.as_ptr().cast()) };
    assert_eq!(text.to_str().unwrap(), "bb");
    let status = unsafe { cd_model_token(model, 1, buf.as_mut_ptr().cast(), 2, &mut written) };
    assert_eq!(status, CdStatus::BufferTooSmall);
    assert_eq!(written, 3, "required capacity includes the terminator");
    let status =
        unsafe { cd_model_token(model, 9, buf.as_mut_ptr().cast(), buf.len(), &mut written) };
    assert_eq!(status, CdStatus::InvalidArgument);

    // Next-token probabilities normalize and reject bad buffers or ids.
    let mut probs = [0.0f64; 3];
    let prefix = [0u32, 1];
    let status = unsafe {
        cd_model_next_probs(model, prefix.as_ptr(), prefix.len(), probs.as_mut_ptr(), 3)
    };
    assert_eq!(status, CdStatus::Ok, "{}", last_error());
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let status = unsafe { cd_model_next_probs(model, ptr::null(), 0, probs.as_mut_ptr(), 3) };
    assert_eq!(status, CdStatus::Ok, "empty prefix: {}", last_error());
    let status = unsafe {
        cd_model_next_probs(model, prefix.as_ptr(), prefix.len(), probs.as_mut_ptr(), 2)
    };
    assert_eq!(status, CdStatus::InvalidArgument);
    let bad = [7u32];
    let status =
        unsafe { cd_model_next_probs(model, bad.as_ptr(), bad.len(), probs.as_mut_ptr(), 3) };
    assert_eq!(status, CdStatus::InvalidArgument);

    unsafe { cd_model_free(model) };
}

#[test]
fn greedy_decoding_fills_the_buffer_after_a_size_query() {
    let dir = tempfile::tempdir().unwrap();
    let model = load(&saved_model(dir.path()));
    let prefix = [0u32];

    let mut needed = 0usize;
    let status = unsafe {
        cd_model_greedy(model, prefix.as_ptr(), prefix.len(), -1, 4, ptr::null_mut(), 0, &mut needed)
    };
    assert_eq!(status, CdStatus::BufferTooSmall);
    assert_eq!(needed, 4, "no stop token, so the cap is exhausted");

    let mut out = vec![0u32; needed];
    let mut len = 0usize;
    let status = unsafe {
        cd_model_greedy(
            model,
            prefix.as_ptr(),
            prefix.len(),
            -1,
            4,
            out.as_mut_ptr(),
            out.len(),
            &mut len,
        )
    };
    assert_eq!(status, CdStatus::Ok, "{}", last_error());
    assert_eq!(len, 4);
    assert!(out.iter().all(|&t| t < 3), "ids stay in the vocabulary");

    // Stopping at an eos id truncates the completion.
    let eos = i64::from(out[0]);
    let status = unsafe {
        cd_model_greedy(
            model,
            prefix.as_ptr(),
            prefix.len(),
            eos,
            4,
            out.as_mut_ptr(),
            out.len(),
            &mut len,
        )
    };
    assert_eq!(status, CdStatus::Ok, "{}", last_error());
    assert_eq!(len, 1);

    unsafe { cd_model_free(model) };
}

#[test]
fn step_scores_match_the_library_functions() {
    let expert = [0.5f64, 0.25, 0.125, 0.125];
    let amateur = [0.25f64; 4];
    let (alpha, beta, epsilon) = (0.3, 0.1, 1e-12);

    let mut kl = 0.0f64;
    let mut selected = false;
    let mut support = [0u32; 4];
    let mut target = [0.0f64; 4];
    let mut support_len = 0usize;
    let status = unsafe {
        cd_score_step(
            expert.as_ptr(),
            amateur.as_ptr(),
            4,
            alpha,
            beta,
            epsilon,
            &mut kl,
            &mut selected,
            support.as_mut_ptr(),
            target.as_mut_ptr(),
            4,
            &mut support_len,
        )
    };
    assert_eq!(status, CdStatus::Ok, "{}", last_error());

    let p = TokenDistribution::new(expert.to_vec()).unwrap();
    let q = TokenDistribution::new(amateur.to_vec()).unwrap();
    let want_kl = kl_divergence(&p, &q, epsilon).unwrap();
    let want_support = masked_support(&p, alpha).unwrap();
    let (_, want_target) = contrast_target(&p, &q, &want_support, epsilon).unwrap();
    assert_eq!(kl, want_kl);
    assert!(selected, "{kl} exceeds {beta}");
    assert_eq!(&support[..support_len], &want_support[..]);
    assert_eq!(&target[..support_len], &want_target[..]);
    assert_eq!(&support[..support_len], &[0, 1]);
    assert!((target[0] - 2.0 / 3.0).abs() < 1e-12, "{}", target[0]);

    // Undersized buffers report the required support size.
    let status = unsafe {
        cd_score_step(
            expert.as_ptr(),
            amateur.as_ptr(),
            4,
            alpha,
            0.4,
            epsilon,
            &mut kl,
            &mut selected,
            ptr::null_mut(),
            ptr::null_mut(),
            0,
            &mut support_len,
        )
    };
    assert_eq!(status, CdStatus::BufferTooSmall);
    assert_eq!(support_len, 2);
    assert!(!selected, "{kl} is below 0.4");

    // A vector that is not a distribution is rejected with a pointer to
    // the offending argument.
    let junk = [0.5f64, 0.5, 0.5, 0.5];
    let status = unsafe {
        cd_score_step(
            junk.as_ptr(),
            amateur.as_ptr(),
            4,
            alpha,
            beta,
            epsilon,
            &mut kl,
            &mut selected,
            support.as_mut_ptr(),
            target.as_mut_ptr(),
            4,
            &mut support_len,
        )
    };
    assert_eq!(status, CdStatus::InvalidArgument);
    assert!(last_error().starts_with("expert:"), "{}", last_error());
}

#[test]
fn generated_header_names_every_entry_point() {
    let header = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cdistill.h"),
    )
    .unwrap();
    for name in [
        "cd_last_error",
        "cd_version",
        "cd_model_load",
        "cd_model_free",
        "cd_model_vocab_len",
        "cd_model_token",
        "cd_model_next_probs",
        "cd_model_greedy",
        "cd_score_step",
        "CdStatus_Ok",
        "typedef struct CdModel CdModel",
    ] {
        assert!(header.contains(name), "{name} missing from the header");
    }
}
