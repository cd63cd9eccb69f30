use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;
use std::slice;

use spider_core::envelope::{self, generate_keypair};
use spider_ffi::*;

unsafe fn buffer(b: *const SpiderBuffer) -> Vec<u8> {
    slice::from_raw_parts(spider_buffer_data(b), spider_buffer_len(b)).to_vec()
}

unsafe fn last_error() -> String {
    let p = spider_last_error();
    assert!(!p.is_null());
    CStr::from_ptr(p).to_string_lossy().into_owned()
}

#[test]
fn seal_open_round_trip() {
    unsafe {
        let mut kp = ptr::null_mut();
        assert_eq!(spider_keypair_generate(&mut kp), SpiderStatus::Ok);
        let mut pk = [0u8; 32];
        assert_eq!(spider_keypair_public_key(kp, pk.as_mut_ptr()), SpiderStatus::Ok);

        let msg = b"row,data\n1,2\n";
        let mut sealed = ptr::null_mut();
        assert_eq!(spider_seal(msg.as_ptr(), msg.len(), pk.as_ptr(), &mut sealed), SpiderStatus::Ok);
        let bytes = buffer(sealed);
        assert_eq!(bytes.len(), 97 + msg.len());

        let mut opened = ptr::null_mut();
        assert_eq!(spider_open(bytes.as_ptr(), bytes.len(), kp, &mut opened), SpiderStatus::Ok);
        assert_eq!(buffer(opened), msg);
        assert!(spider_last_error().is_null());

        let mut tampered = bytes.clone();
        *tampered.last_mut().unwrap() ^= 1;
        let mut out = ptr::null_mut();
        assert_eq!(
            spider_open(tampered.as_ptr(), tampered.len(), kp, &mut out),
            SpiderStatus::AuthenticationFailure
        );
        assert!(out.is_null());
        assert_eq!(
            spider_open(bytes.as_ptr(), 10, kp, &mut out),
            SpiderStatus::EnvelopeFormat
        );

        spider_buffer_free(opened);
        spider_buffer_free(sealed);
        spider_keypair_free(kp);
    }
}

#[test]
fn keys_interoperate_with_core() {
    let mut rng = rand::rngs::OsRng;
    let core_kp = generate_keypair(&mut rng).unwrap();
    unsafe {
        let mut kp = ptr::null_mut();
        assert_eq!(spider_keypair_from_secret(core_kp.secret_bytes().as_ptr(), &mut kp), SpiderStatus::Ok);
        let mut fp = [0u8; 32];
        assert_eq!(spider_keypair_fingerprint(kp, fp.as_mut_ptr()), SpiderStatus::Ok);
        assert_eq!(fp, core_kp.fingerprint());
        let mut sk = [0u8; 32];
        assert_eq!(spider_keypair_secret_key(kp, sk.as_mut_ptr()), SpiderStatus::Ok);
        assert_eq!(sk, core_kp.secret_bytes());

        let env = envelope::seal(b"from core", &core_kp.public_key(), &mut rng).unwrap().to_bytes();
        let mut opened = ptr::null_mut();
        assert_eq!(spider_open(env.as_ptr(), env.len(), kp, &mut opened), SpiderStatus::Ok);
        assert_eq!(buffer(opened), b"from core");
        spider_buffer_free(opened);
        spider_keypair_free(kp);
    }
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(spider_keypair_generate(ptr::null_mut()), SpiderStatus::NullArgument);
        assert!(last_error().contains("null"));
        let mut out = ptr::null_mut();
        assert_eq!(spider_seal(ptr::null(), 5, [0u8; 32].as_ptr(), &mut out), SpiderStatus::NullArgument);
        assert_eq!(spider_open(ptr::null(), 0, ptr::null(), &mut out), SpiderStatus::NullArgument);
        // freeing NULL is a no-op
        spider_buffer_free(ptr::null_mut());
        spider_keypair_free(ptr::null_mut());
        assert_eq!(spider_buffer_len(ptr::null()), 0);
    }
}

#[test]
fn pseudonym_and_dp_helpers() {
    unsafe {
        let mut out = [0 as std::ffi::c_char; 64];
        let empty = CString::new("").unwrap();
        assert_eq!(spider_pseudonym(empty.as_ptr(), ptr::null(), 0, out.as_mut_ptr()), SpiderStatus::Ok);
        let hex: String = out.iter().map(|&c| c as u8 as char).collect();
        assert_eq!(hex, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");

        let mut a = [0.0; 16];
        let mut b = [0.0; 16];
        assert_eq!(spider_laplace_samples(2.0, 9, a.as_mut_ptr(), a.len()), SpiderStatus::Ok);
        assert_eq!(spider_laplace_samples(2.0, 9, b.as_mut_ptr(), b.len()), SpiderStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(spider_laplace_samples(0.0, 9, a.as_mut_ptr(), 1), SpiderStatus::InvalidArgument);

        let q = CString::new(
            r#"{"kind":"sum","value_column":"v","clamp":[0,10],"epsilon":1,
                "unit":{"kind":"user","user_column":"u","cap":3}}"#,
        )
        .unwrap();
        let mut s = 0.0;
        assert_eq!(spider_sensitivity(q.as_ptr(), &mut s), SpiderStatus::Ok);
        assert_eq!(s, 30.0);
        let bad = CString::new(r#"{"kind":"sum","value_column":"v","epsilon":1}"#).unwrap();
        assert_eq!(spider_sensitivity(bad.as_ptr(), &mut s), SpiderStatus::InvalidArgument);
        assert!(last_error().to_lowercase().contains("clamp"));
    }
}

#[test]
fn run_pipeline_through_c_abi() {
    let mut rng = rand::rngs::OsRng;
    let provider = generate_keypair(&mut rng).unwrap();
    let config = format!(
        r#"{{"schema": {{"columns": [
              {{"name":"zip","role":"quasi","kind":"categorical"}},
              {{"name":"dx","role":"sensitive","kind":"categorical"}}]}},
            "hierarchies": {{"zip": {{"csv": "a,*\nb,*\n"}}}},
            "release": {{"k_anon": {{"k": 2}}}},
            "encryption": {{"provider_public_key": "{}"}}}}"#,
        provider.public_base64()
    );
    let config = CString::new(config).unwrap();
    unsafe {
        let mut enclave = ptr::null_mut();
        assert_eq!(spider_keypair_generate(&mut enclave), SpiderStatus::Ok);
        let mut pk = [0u8; 32];
        spider_keypair_public_key(enclave, pk.as_mut_ptr());
        let input = envelope::seal(b"zip,dx\na,flu\nb,flu\nb,cold\n", &pk, &mut rng).unwrap().to_bytes();

        let (mut out, mut report) = (ptr::null_mut(), ptr::null_mut());
        let status = spider_run_pipeline(config.as_ptr(), input.as_ptr(), input.len(), enclave, &mut out, &mut report);
        assert_eq!(status, SpiderStatus::Ok);
        let released = envelope::open_bytes(&buffer(out), &provider).unwrap();
        assert_eq!(released, b"zip,dx\n*,flu\n*,flu\n*,cold\n");
        let parsed: serde_json::Value = serde_json::from_slice(&buffer(report)).unwrap();
        assert_eq!(parsed["k_report"]["histogram"], serde_json::json!({"3": 1}));
        spider_buffer_free(out);
        spider_buffer_free(report);

        let bad = CString::new("{}").unwrap();
        let status = spider_run_pipeline(bad.as_ptr(), input.as_ptr(), input.len(), enclave, &mut out, &mut report);
        assert_eq!(status, SpiderStatus::ConfigInvalid);
        spider_keypair_free(enclave);
    }
}

#[test]
fn header_is_generated() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/spider.h")).unwrap();
    for name in [
        "SPIDER_STATUS_AUTHENTICATION_FAILURE",
        "typedef struct SpiderKeyPair SpiderKeyPair;",
        "typedef struct SpiderBuffer SpiderBuffer;",
        "spider_run_pipeline",
        "spider_last_error",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libspider_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let exe = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("spider_smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 0.1.0"));
}
