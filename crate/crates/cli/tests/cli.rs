//! End-to-end tests of the `gls` binary: output layout, determinism, exit
//! codes, experiments and the HTTP server.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use gls_core::config::RunConfig;
use gls_core::manifest::load_rgb;
use gls_core::providers::remote::RemoteSettings;
use gls_core::providers::wire::encode_png_b64;
use gls_core::providers::RemoteProvider;
use gls_core::{CaseInput, Evaluator, ScoreBundle};
use serde_json::{json, Value};
use tempfile::TempDir;

const GLS: &str = env!("CARGO_BIN_EXE_gls");

fn gls(args: &[&str]) -> Output {
    Command::new(GLS).args(args).output().expect("gls runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Small images and patches keep the end-to-end runs fast.
fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "providers": {"kind": "baseline", "seed": 7},
        "eval": {"patch_size": 32, "stride": 16}
    });
    if let (Some(base), Some(extra)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            if let (Some(Value::Object(b)), Value::Object(e)) = (base.get_mut(k), v) {
                b.extend(e.clone());
            } else {
                base.insert(k.clone(), v.clone());
            }
        }
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn synth(dir: &Path, cfg: &Path, cases: usize, with_reports: bool) -> PathBuf {
    let out = dir.join("synth");
    let n = cases.to_string();
    let mut args = vec![
        "synth",
        "--config",
        s(cfg),
        "--out",
        s(&out),
        "--cases",
        &n,
        "--size",
        "96",
        "--corpus-seed",
        "11",
    ];
    if with_reports {
        args.push("--with-reports");
    }
    let o = gls(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn read_bundle(path: &Path) -> ScoreBundle {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn score_replay_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let syn = synth(tmp.path(), &cfg, 3, false);
    let manifest = syn.join("manifest.jsonl");
    let transcript = tmp.path().join("transcript.jsonl");

    let rec = gls(&[
        "score",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("rec")),
        "--transcript",
        s(&transcript),
    ]);
    assert_eq!(code(&rec), 0, "{}", stderr(&rec));
    assert!(transcript.exists());

    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = gls(&[
            "score",
            "--config",
            s(&cfg),
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--transcript",
            s(&transcript),
            "--transcript-mode",
            "replay",
            "--workers",
            "2",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push(out);
    }
    let names = listing(&outputs[0]);
    assert_eq!(
        names,
        [
            "aggregate.json",
            "errors.jsonl",
            "summary.csv",
            "synth-000.json",
            "synth-001.json",
            "synth-002.json"
        ]
    );
    for n in &names {
        let a = std::fs::read(outputs[0].join(n)).unwrap();
        let b = std::fs::read(outputs[1].join(n)).unwrap();
        assert_eq!(a, b, "{n} differs between replays");
    }
    // replayed scores equal the recorded session's
    for id in ["synth-000", "synth-001", "synth-002"] {
        let rec = read_bundle(&tmp.path().join("rec").join(format!("{id}.json")));
        let rep = read_bundle(&outputs[0].join(format!("{id}.json")));
        assert_eq!(rec.s_total.to_bits(), rep.s_total.to_bits());
        assert_eq!(rec.report, rep.report);
        assert!(rep.provenance.transcript_hash.is_some());
    }

    let summary = std::fs::read_to_string(outputs[0].join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("case_id,s_g,s_l,s_s,s_total,routing,config_hash,tool_version")
    );
    assert_eq!(lines.count(), 3);
    assert_eq!(std::fs::read_to_string(outputs[0].join("errors.jsonl")).unwrap(), "");
}

#[test]
fn missing_image_is_isolated_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let syn = synth(tmp.path(), &cfg, 2, true);
    let manifest = syn.join("manifest.jsonl");
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text.push_str("{\"case_id\":\"lost\",\"image\":\"images/absent.png\"}\n");
    std::fs::write(&manifest, text).unwrap();

    let out = tmp.path().join("out");
    let o = gls(&[
        "score",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(out.join("synth-000.json").exists() && out.join("synth-001.json").exists());
    assert!(!out.join("lost.json").exists());
    let errors = std::fs::read_to_string(out.join("errors.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(errors.lines().next().unwrap()).unwrap();
    assert_eq!(rec["case_id"], "lost");
    assert_eq!(rec["stage"], "input");
    assert!(rec["config_hash"].as_str().is_some_and(|h| h.len() == 64));
}

#[test]
fn config_failures_exit_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let syn = synth(tmp.path(), &cfg, 1, true);
    let manifest = syn.join("manifest.jsonl");
    let out = tmp.path().join("out");

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"eval": {"patch_sise": 32}}"#).unwrap();
    let o = gls(&[
        "score",
        "--config",
        s(&bad),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("patch_sise"));

    let weights = write_config(
        tmp.path(),
        json!({"eval": {"weights": {"w_g": 0.5, "w_l": 0.5, "w_s": 0.5}}}),
    );
    assert_eq!(
        code(&gls(&[
            "score",
            "--config",
            s(&weights),
            "--manifest",
            s(&manifest),
            "--out",
            s(&out)
        ])),
        3
    );

    let cfg = write_config(tmp.path(), json!({}));
    let dup = tmp.path().join("dup.jsonl");
    let line = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&dup, format!("{line}{line}")).unwrap();
    let o = gls(&["score", "--config", s(&cfg), "--manifest", s(&dup), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("duplicate case id"));

    let replay_missing = gls(&[
        "score",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--transcript",
        s(&tmp.path().join("none.jsonl")),
        "--transcript-mode",
        "replay",
    ]);
    assert_eq!(code(&replay_missing), 3);
}

#[test]
fn stability_skip_renormalizes_weights() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let syn = synth(tmp.path(), &cfg, 2, true);
    let out = tmp.path().join("out");
    let o = gls(&[
        "score",
        "--config",
        s(&cfg),
        "--manifest",
        s(&syn.join("manifest.jsonl")),
        "--out",
        s(&out),
        "--stability",
        "skip",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b = read_bundle(&out.join("synth-000.json"));
    assert!(b.s_s.is_none());
    assert!(b.evidence.stability.is_none());
    assert_eq!(b.weights.w_s, 0.0);
    assert!((b.weights.w_g - 0.4 / 0.7).abs() < 1e-12);
    assert!((b.weights.w_l - 0.3 / 0.7).abs() < 1e-12);
    assert!((b.s_total - (b.weights.w_g * b.s_g + b.weights.w_l * b.s_l)).abs() < 1e-12);
    let flags = serde_json::to_value(&b.flags).unwrap();
    assert!(flags.as_array().unwrap().contains(&json!("stability_skipped")));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    // empty s_s column
    assert!(summary.lines().nth(1).unwrap().split(',').nth(3) == Some(""));
}

#[test]
fn sensitivity_directionality_and_edge_cases() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let syn = synth(tmp.path(), &cfg, 20, false);
    let out = tmp.path().join("sens");
    let o = gls(&[
        "sensitivity",
        "--config",
        s(&cfg),
        "--manifest",
        s(&syn.join("corpus.jsonl")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("sensitivity.json")).unwrap()).unwrap();
    assert!(report["config_hash"].is_string());
    let delta = |metric: &str, group: &str| {
        report["rows"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["metric"] == metric && r["group"] == group)
            .and_then(|r| r["delta_percent"].as_f64())
            .unwrap()
    };
    assert!(delta("s_g", "visual_hallucination") > delta("s_g", "logic_error"));
    assert!(delta("s_l", "logic_error") > delta("s_l", "visual_hallucination"));

    // control-only corpus: every Δ is zero
    let control_only = tmp.path().join("control.jsonl");
    let lines: Vec<String> = std::fs::read_to_string(syn.join("corpus.jsonl"))
        .unwrap()
        .lines()
        .take(3)
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            json!({"case_id": v["case_id"], "image": syn.join(v["image"].as_str().unwrap()), "control": v["control"]})
                .to_string()
        })
        .collect();
    std::fs::write(&control_only, lines.join("\n")).unwrap();
    let out2 = tmp.path().join("sens2");
    let o = gls(&[
        "sensitivity",
        "--config",
        s(&cfg),
        "--manifest",
        s(&control_only),
        "--out",
        s(&out2),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out2.join("sensitivity.json")).unwrap()).unwrap();
    assert!(report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["delta_percent"] == 0.0));

    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "\n").unwrap();
    assert_eq!(
        code(&gls(&[
            "sensitivity",
            "--config",
            s(&cfg),
            "--manifest",
            s(&empty),
            "--out",
            s(&out2)
        ])),
        3
    );
}

#[test]
fn ablate_sweep_and_gate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let syn = synth(tmp.path(), &cfg, 6, false);
    let manifest = syn.join("manifest.jsonl");
    let scored = tmp.path().join("scored");
    let o = gls(&[
        "score",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&scored),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // severity ranking that agrees with the fused scores: lowest score = rank 1
    let mut bundles: Vec<ScoreBundle> = (0..6)
        .map(|i| read_bundle(&scored.join(format!("synth-{i:03}.json"))))
        .collect();
    bundles.sort_by(|a, b| a.s_total.partial_cmp(&b.s_total).unwrap());
    let mut sev = String::from("case_id,severity_rank\n");
    for (rank, b) in bundles.iter().enumerate() {
        sev.push_str(&format!("{},{}\n", b.case_id, rank + 1));
    }
    let sev_path = tmp.path().join("severity.csv");
    std::fs::write(&sev_path, &sev).unwrap();

    let out = tmp.path().join("abl");
    let o = gls(&[
        "ablate",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--severity",
        s(&sev_path),
        "--bundles",
        s(&scored),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t: Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(t["rho_full"], 1.0);
    for row in t["rows"].as_array().unwrap() {
        let rho = row["rho"].as_f64().unwrap();
        assert!((row["drop_percent"].as_f64().unwrap() - 100.0 * (1.0 - rho)).abs() < 1e-9);
    }

    // rescoring in place gives the same table as reusing bundles
    let out_rescored = tmp.path().join("abl2");
    let o = gls(&[
        "ablate",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--severity",
        s(&sev_path),
        "--out",
        s(&out_rescored),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("ablation.json")).unwrap(),
        std::fs::read(out_rescored.join("ablation.json")).unwrap()
    );

    let short = tmp.path().join("short.csv");
    let missing = &bundles[2].case_id;
    std::fs::write(
        &short,
        sev.lines()
            .filter(|l| !l.starts_with(missing.as_str()))
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .unwrap();
    let o = gls(&[
        "ablate",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--severity",
        s(&short),
        "--bundles",
        s(&scored),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains(missing.as_str()));

    let o = gls(&[
        "sweep",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--severity",
        s(&sev_path),
        "--bundles",
        s(&scored),
        "--out",
        s(&out),
        "--step",
        "0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 6);
    let rhos: Vec<f64> = sweep
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap_or(f64::NEG_INFINITY))
        .collect();
    assert!(
        rhos.windows(2).all(|w| w[0] >= w[1]),
        "sweep rows sorted best first: {rhos:?}"
    );

    let lenient = write_config(
        tmp.path(),
        json!({"eval": {"thresholds": {"deploy_min": 0.05, "reject_max": 0.01}}}),
    );
    let gated = tmp.path().join("gated");
    let o = gls(&[
        "gate",
        "--config",
        s(&lenient),
        "--bundles",
        s(&scored),
        "--out",
        s(&gated),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let gate = std::fs::read_to_string(gated.join("gate.csv")).unwrap();
    assert_eq!(gate.lines().count(), 7);
    assert!(gate.lines().skip(1).all(|l| l.split(',').nth(2) == Some("Deploy")));
}

struct Server {
    child: Child,
    url: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server(cfg: &Path, token: &str) -> Server {
    let mut child = Command::new(GLS)
        .args(["serve", "--config", s(cfg), "--addr", "127.0.0.1:0", "--token", token])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .expect("server starts");
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .expect("address line")
        .to_owned();
    Server { child, url }
}

#[test]
fn server_speaks_the_wire_protocol_and_scores() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let syn = synth(tmp.path(), &cfg, 1, true);
    let server = start_server(&cfg, "s3cret");
    let http = reqwest::blocking::Client::new();

    let health: Value = http
        .get(format!("{}/healthz", server.url))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(health["status"], "ok");

    let denied = http
        .post(format!("{}/v1/embed_text", server.url))
        .json(&json!({"texts": ["tumor"]}))
        .send()
        .unwrap();
    assert_eq!(denied.status().as_u16(), 401);

    // the local evaluator for the same config
    let run = RunConfig::load(&cfg).unwrap();
    let resources = run.load_resources().unwrap();
    let local = Evaluator::new(
        run.build_providers(&resources).unwrap().providers,
        resources.clone(),
        run.eval.clone(),
    )
    .unwrap()
    .with_config_hash(run.hash(&resources));
    let image = load_rgb(&syn.join("images/synth-000.png")).unwrap();
    let report = std::fs::read_to_string(syn.join("manifest.jsonl")).unwrap();
    let report: Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    let report = report["report"].as_str().unwrap().to_owned();
    let expected = local
        .evaluate(&CaseInput {
            case_id: "synth-000",
            image: &image,
            report: Some(&report),
        })
        .unwrap();

    // /v1/score runs the same pipeline
    let remote_bundle: ScoreBundle = http
        .post(format!("{}/v1/score", server.url))
        .bearer_auth("s3cret")
        .json(&json!({"case_id": "synth-000", "image_png_b64": encode_png_b64(&image), "report": report}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(remote_bundle, expected);

    let bad = http
        .post(format!("{}/v1/score", server.url))
        .bearer_auth("s3cret")
        .json(&json!({"case_id": "x", "image_png_b64": "not base64!"}))
        .send()
        .unwrap();
    assert_eq!(bad.status().as_u16(), 400);
    assert!(bad.json::<Value>().unwrap()["error"].is_string());

    // the blocking client, pointed at the server, reproduces the in-process scores
    let settings = RemoteSettings {
        endpoint: server.url.clone(),
        dim: 64,
        max_in_flight: 4,
        timeout_secs: 30,
        batch_size: 5,
        token: Some("s3cret".into()),
    };
    let remote = Evaluator::new(
        RemoteProvider::new(settings).unwrap().providers(),
        resources,
        run.eval.clone(),
    )
    .unwrap();
    let via_remote = remote
        .evaluate(&CaseInput {
            case_id: "synth-000",
            image: &image,
            report: Some(&report),
        })
        .unwrap();
    assert_eq!(via_remote.s_g.to_bits(), expected.s_g.to_bits());
    assert_eq!(via_remote.s_l.to_bits(), expected.s_l.to_bits());
    assert_eq!(via_remote.s_s.map(f64::to_bits), expected.s_s.map(f64::to_bits));
    assert_eq!(via_remote.s_total.to_bits(), expected.s_total.to_bits());
    assert_eq!(via_remote.evidence, expected.evidence);
}
