use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const BIN: &str = env!("CARGO_BIN_EXE_editforge");

fn editforge(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("EDITFORGE_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, n: usize) {
    let out = editforge(&[
        "synth",
        "--n",
        &n.to_string(),
        "--out",
        dir.to_str().unwrap(),
        "--size",
        "48",
        "--seed",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn run_args<'a>(data: &'a str, root: &'a str) -> Vec<String> {
    vec![
        "--output-root".into(),
        root.into(),
        "--set".into(),
        "source.kind=synthetic".into(),
        "--set".into(),
        format!("source.path={data}"),
        "--dataset".into(),
        "cli".into(),
    ]
}

fn with(cmd: &str, args: &[String], extra: &[&str]) -> Output {
    let mut all = vec![cmd.to_string()];
    all.extend(args.iter().cloned());
    all.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = all.iter().map(String::as_str).collect();
    editforge(&refs)
}

#[test]
fn exit_codes() {
    let data = tempdir().unwrap();
    let root = tempdir().unwrap();
    synth(data.path(), 4);
    let args = run_args(data.path().to_str().unwrap(), root.path().to_str().unwrap());

    let out = with("mask", &args, &[]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("triplets"));

    assert_eq!(code(&with("ingest", &args, &["--set", "mask.tau=7"])), 1);
    assert_eq!(code(&with("ingest", &args, &["--bogus-flag"])), 1);
    assert_eq!(
        code(&editforge(&["ingest", "--set", "source.kind=synthetic"])),
        1
    );

    let broken = tempdir().unwrap();
    fs::write(broken.path().join("manifest.jsonl"), "{oops\n").unwrap();
    let bad = run_args(
        broken.path().to_str().unwrap(),
        root.path().to_str().unwrap(),
    );
    assert_eq!(code(&with("ingest", &bad, &[])), 2);

    assert_eq!(code(&with("run", &args, &[])), 0);
    let audit = with("audit", &args, &[]);
    assert_eq!(code(&audit), 0, "{}", stderr(&audit));
    assert!(stderr(&audit).contains("audited 4 chains, 0 violations"));
}

#[test]
fn staged_run_then_cache() {
    let data = tempdir().unwrap();
    let root = tempdir().unwrap();
    synth(data.path(), 6);
    let args = run_args(data.path().to_str().unwrap(), root.path().to_str().unwrap());
    for cmd in ["ingest", "mask", "difficulty", "category", "chain"] {
        let out = with(cmd, &args, &["--workers", "2"]);
        assert_eq!(code(&out), 0, "{cmd}: {}", stderr(&out));
        assert!(stderr(&out).contains("done"));
    }
    let again = with("run", &args, &[]);
    assert_eq!(
        stderr(&again).matches("cached").count(),
        5,
        "{}",
        stderr(&again)
    );
    let forced = with("run", &args, &["--force"]);
    assert_eq!(stderr(&forced).matches("cached").count(), 0);
    assert!(root.path().join("chains/cli.jsonl").is_file());

    let report = with("report", &args, &[]);
    assert_eq!(code(&report), 0, "{}", stderr(&report));
    assert!(root.path().join("report/cli/report.txt").is_file());
}

#[test]
fn output_root_from_environment() {
    let data = tempdir().unwrap();
    let root = tempdir().unwrap();
    synth(data.path(), 2);
    let out = Command::new(BIN)
        .args(["ingest", "--set", "source.kind=synthetic", "--set"])
        .arg(format!("source.path={}", data.path().display()))
        .env("EDITFORGE_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(root.path().join("triplets/synthetic.jsonl").is_file());
}

#[test]
fn external_backend_matches_proxy() {
    let data = tempdir().unwrap();
    synth(data.path(), 5);
    let proxy = tempdir().unwrap();
    let external = tempdir().unwrap();
    let d = data.path().to_str().unwrap();
    let out = with("run", &run_args(d, proxy.path().to_str().unwrap()), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let command = format!("perceptual.command=[{:?}, \"perceptual-server\"]", BIN);
    let out = with(
        "run",
        &run_args(d, external.path().to_str().unwrap()),
        &["--set", "perceptual.backend=external", "--set", &command],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let masks = |root: &Path| -> Vec<serde_json::Value> {
        fs::read_to_string(root.join("masks/cli.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let (a, b) = (masks(proxy.path()), masks(external.path()));
    assert_eq!(a.len(), 5);
    // The wire format carries f32 maps, so only float precision may differ.
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x["scope"], y["scope"]);
        for key in ["combined_diff_mean", "mask_area_frac"] {
            let (p, e) = (x[key].as_f64().unwrap(), y[key].as_f64().unwrap());
            assert!((p - e).abs() < 1e-6, "{key}: {p} vs {e}");
        }
    }
    let again = tempdir().unwrap();
    let out = with(
        "run",
        &run_args(d, again.path().to_str().unwrap()),
        &["--set", "perceptual.backend=external", "--set", &command],
    );
    assert_eq!(code(&out), 0);
    assert_eq!(masks(again.path()), b);
}

#[test]
fn shorthand_flags_reach_the_config() {
    let data = tempdir().unwrap();
    let root = tempdir().unwrap();
    synth(data.path(), 4);
    let args = run_args(data.path().to_str().unwrap(), root.path().to_str().unwrap());
    let out = with(
        "run",
        &args,
        &["--stack", "lab,ssim", "--tau", "0.58", "--scorer", "v1"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let masks = fs::read_to_string(root.path().join("masks/cli.jsonl")).unwrap();
    assert!(
        masks
            .lines()
            .all(|l| l.contains(r#""signal_stack":["lab","ssim"]"#)),
        "{masks}"
    );
    let diff = fs::read_to_string(root.path().join("difficulty/cli.jsonl")).unwrap();
    assert!(diff.lines().all(|l| l.contains(r#""scorer_version":"v1""#)));
    assert_eq!(code(&with("run", &args, &["--tau", "2"])), 1);
}

#[test]
fn sweep_writes_csv() {
    let data = tempdir().unwrap();
    let root = tempdir().unwrap();
    synth(data.path(), 10);
    let args = run_args(data.path().to_str().unwrap(), root.path().to_str().unwrap());
    assert_eq!(code(&with("ingest", &args, &[])), 0);
    assert_eq!(code(&with("mask", &args, &[])), 0);
    let csv = root.path().join("sweep.csv");
    let out = with(
        "sweep",
        &args,
        &[
            "--candidates",
            "0.1,0.5,0.9",
            "--out",
            csv.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let body = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(lines[0], "threshold,path1_global_rate,n_total");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.ends_with(",10")));
    assert!(stderr(&out).contains("closest to 30.0%"));

    let missing = editforge(&[
        "sweep",
        "--masks",
        "/nonexistent/masks.jsonl",
        "--candidates",
        "0.5",
    ]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn eval_scores_reference_chains() {
    let data = tempdir().unwrap();
    let root = tempdir().unwrap();
    synth(data.path(), 4);
    let args = run_args(data.path().to_str().unwrap(), root.path().to_str().unwrap());
    assert_eq!(code(&with("run", &args, &[])), 0);
    let refs = root.path().join("chains/cli.jsonl");
    let preds = root.path().join("preds.jsonl");
    let body: String = fs::read_to_string(&refs)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let h = &v["header"];
            let text = format!(
                r#"{{"category":"{}","scope":"{}","difficulty_bin":"{}"}}"#,
                h["category"].as_str().unwrap(),
                v["descriptor"].as_str().unwrap(),
                h["difficulty"].as_str().unwrap()
            );
            serde_json::json!({"triplet_id": v["triplet_id"], "generation_text": text, "mode": "label"})
                .to_string()
                + "\n"
        })
        .collect();
    fs::write(&preds, body).unwrap();
    let out_dir = root.path().join("eval");
    let out = editforge(&[
        "eval",
        "--preds",
        preds.to_str().unwrap(),
        "--refs",
        refs.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["joint_accuracy"], 1.0);
    assert!(out_dir.join("metrics.csv").is_file());
}
