use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use spider_core::envelope::{self, Envelope, KeyPair};
use spider_core::service::{router, AppState};

const MARKER: &str = "PLAINTEXT-MARKER-91";

fn csv() -> String {
    format!("name,zip,dx\n{MARKER},a,flu\nbo,b,flu\ncy,b,cold\ndi,b,flu\ned,b,flu\nfay,b,{MARKER}x\n")
}

fn spider(dir: &Path, args: &[&str]) -> Output {
    let tmp = dir.join("tmp");
    fs::create_dir_all(&tmp).unwrap();
    Command::new(env!("CARGO_BIN_EXE_spider"))
        .args(args)
        .current_dir(dir)
        .env("TMPDIR", &tmp)
        .env_remove("SPIDER_LISTEN")
        .env_remove("SPIDER_TOKEN")
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| {
        panic!("stderr not JSON: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn read_key(path: PathBuf) -> KeyPair {
    KeyPair::from_secret_base64(fs::read_to_string(path).unwrap().trim()).unwrap()
}

fn write_config(dir: &Path, release: Value) {
    let provider_pub = fs::read_to_string(dir.join("keys/provider.pub")).unwrap();
    let cfg = json!({
        "schema": {"columns": [
            {"name":"name","role":"direct","kind":"categorical"},
            {"name":"zip","role":"quasi","kind":"categorical"},
            {"name":"dx","role":"sensitive","kind":"categorical"}]},
        "hierarchies": {"zip": {"path": "zip.csv"}},
        "classical": {"suppress": ["name"]},
        "release": release,
        "seed": 21,
        "encryption": {"provider_public_key": provider_pub.trim(), "enclave_key": "keys/enclave.key"}
    });
    fs::write(dir.join("zip.csv"), "a,*\nb,*\n").unwrap();
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
}

/// Generates keys, seals the plaintext from a separate directory into `work`
/// and returns both directories.
fn setup() -> (tempfile::TempDir, tempfile::TempDir) {
    let work = tempfile::tempdir().unwrap();
    let outside = tempfile::tempdir().unwrap();
    let w = work.path();
    for name in ["enclave", "provider"] {
        let out = spider(w, &["keygen", "-o", "keys", "--name", name]);
        assert!(out.status.success());
    }
    let plain = outside.path().join("input.csv");
    fs::write(&plain, csv()).unwrap();
    let out = spider(
        w,
        &["seal", "--recipient", "keys/enclave.pub", "-i", plain.to_str().unwrap(), "-o", "input.spdr"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (work, outside)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn keygen_writes_two_files_and_prints_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let out = spider(dir.path(), &["keygen", "-o", "keys/"]);
    assert!(out.status.success());
    let fp = String::from_utf8(out.stdout).unwrap();
    let fp = fp.trim();
    assert_eq!(fp.len(), 64);
    assert!(fp.chars().all(|c| c.is_ascii_hexdigit()));
    let kp = read_key(dir.path().join("keys/spider.key"));
    assert_eq!(hex::encode(kp.fingerprint()), fp);
    let public = fs::read_to_string(dir.path().join("keys/spider.pub")).unwrap();
    assert_eq!(public.trim(), kp.public_base64());
    assert_eq!(files_under(&dir.path().join("keys")).len(), 2);
}

#[test]
fn seal_open_round_trip() {
    let (work, outside) = setup();
    let back = outside.path().join("back.csv");
    let out = spider(
        work.path(),
        &["open", "--key", "keys/enclave.key", "-i", "input.spdr", "-o", back.to_str().unwrap()],
    );
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(back).unwrap(), csv());

    let out = spider(work.path(), &["open", "--key", "keys/provider.key", "-i", "input.spdr", "-o", "-"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "envelope");
}

#[test]
fn run_k_anon_and_plaintext_never_on_disk() {
    let (work, _outside) = setup();
    let w = work.path();
    write_config(w, json!({"k_anon": {"k": 2}}));
    let out = spider(
        w,
        &["run", "--config", "config.json", "-i", "input.spdr", "-o", "out.spdr", "--report", "report.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: Value = serde_json::from_slice(&fs::read(w.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["path"], "k_anon");
    assert_eq!(report["k_report"]["histogram"], json!({"6": 1}));
    assert_eq!(report["k_report"]["chosen_node"], json!([1]));

    let sealed = Envelope::from_bytes(&fs::read(w.join("out.spdr")).unwrap()).unwrap();
    let provider = read_key(w.join("keys/provider.key"));
    let released = String::from_utf8(envelope::open(&sealed, &provider).unwrap()).unwrap();
    assert_eq!(
        released,
        format!("name,zip,dx\n*,*,flu\n*,*,flu\n*,*,cold\n*,*,flu\n*,*,flu\n*,*,{MARKER}x\n")
    );

    // Nothing in the working tree, including TMPDIR, holds the input plaintext
    // or the released table in the clear.
    for path in files_under(w) {
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(!text.contains(MARKER), "plaintext found in {}", path.display());
        assert!(!text.contains("cold"), "plaintext found in {}", path.display());
    }
}

#[test]
fn run_errors_are_machine_readable() {
    let (work, _outside) = setup();
    let w = work.path();
    write_config(w, json!({"k_anon": {"k": 2}, "dp": {"queries": []}}));
    let out = spider(w, &["run", "--config", "config.json", "-i", "input.spdr", "-o", "out.spdr"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "config_invalid");
    assert!(!w.join("out.spdr").exists());

    write_config(w, json!({"k_anon": {"k": 7}}));
    let out = spider(w, &["run", "--config", "config.json", "-i", "input.spdr", "-o", "out.spdr"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "unsatisfiable");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["run", "--config"], &["attest-demo", "--tamper", "bogus"], &[]] {
        let out = spider(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["error"], "usage");
    }
}

#[test]
fn attest_demo_expired_jwt() {
    let dir = tempfile::tempdir().unwrap();
    let out = spider(dir.path(), &["attest-demo", "--tamper", "expired-jwt", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        v["transcript"]["outcome"],
        json!({"rejected_at": {"step": 6, "reason": "Expired"}})
    );
    assert_eq!(stderr_json(&out)["error"], "attestation_rejected");

    let out = spider(dir.path(), &["attest-demo", "--loopback", "--seed", "4"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["transcript"]["outcome"], "success");
    assert_eq!(v["plaintext_leaked"], false);
}

#[test]
fn tradeoff_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("q.json"),
        r#"{"kind":"count","predicate":{"column":"dx","equals":"flu"},"epsilon":1.0}"#,
    )
    .unwrap();
    let out = spider(
        dir.path(),
        &["tradeoff", "--config", "q.json", "--eps", "0.1,0.5,1,2", "--trials", "500", "--seed", "2"],
    );
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let analytic: Vec<f64> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["analytic_mae"].as_f64().unwrap())
        .collect();
    assert_eq!(analytic, [10.0, 2.0, 1.0, 0.5]);
}

#[tokio::test]
async fn cli_and_service_release_identical_output() {
    let (work, _outside) = setup();
    let w = work.path();
    let release = json!({"dp": {"queries": [
        {"kind": "count", "predicate": {"column": "dx", "equals": "flu"}, "epsilon": 0.3},
        {"kind": "histogram", "group_by": "zip", "bins": ["a", "b"], "epsilon": 0.7}]}});
    write_config(w, release);
    let out = spider(w, &["run", "--config", "config.json", "-i", "input.spdr", "-o", "out.spdr"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let provider = read_key(w.join("keys/provider.key"));
    let cli_out = envelope::open(
        &Envelope::from_bytes(&fs::read(w.join("out.spdr")).unwrap()).unwrap(),
        &provider,
    )
    .unwrap();

    let mut config: Value = serde_json::from_slice(&fs::read(w.join("config.json")).unwrap()).unwrap();
    config["hierarchies"]["zip"] = json!({"csv": "a,*\nb,*\n"});
    config["encryption"].as_object_mut().unwrap().remove("enclave_key");
    let state = AppState::new("t", read_key(w.join("keys/enclave.key")));
    let app = router(Arc::new(state));
    let input = Envelope::from_bytes(&fs::read(w.join("input.spdr")).unwrap()).unwrap();
    let body = json!({"config": config, "input": input.to_base64()});
    let req = Request::post("/runs")
        .header(header::AUTHORIZATION, "Bearer t")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    let id = v["run_id"].as_str().unwrap().to_string();

    let mut sealed = None;
    for _ in 0..500 {
        let req = Request::get(format!("/runs/{id}/output")).body(Body::empty()).unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        if resp.status().is_success() {
            sealed = Some(resp.into_body().collect().await.unwrap().to_bytes());
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }
    let sealed = Envelope::from_bytes(&sealed.expect("run finished")).unwrap();
    let service_out = envelope::open(&sealed, &provider).unwrap();
    assert_eq!(cli_out, service_out);
}
