use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn lwdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lwdet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Failures print exactly one `error:` line and nothing else.
fn assert_fails(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

fn write_ppm(path: &Path, w: usize, h: usize, fill: u8) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(std::iter::repeat_n(fill, w * h * 3));
    fs::write(path, bytes).unwrap();
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

#[test]
fn compare_reports_table_three_totals() {
    let o = lwdet(&["compare", "--nc", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("baseline      3011417"), "{text}");
    assert!(text.contains("improved      2024662"), "{text}");
    let pct: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("parameter reduction: "))
        .and_then(|v| v.trim_end_matches('%').parse().ok())
        .unwrap();
    assert!((30.0..40.0).contains(&pct), "{pct}");
}

#[test]
fn summarize_writes_matching_csv_deterministically() {
    let dir = TempDir::new().unwrap();
    let csv = p(&dir, "s.csv");
    let a = lwdet(&["summarize", "--model", "improved", "--nc", "3", "--csv", &csv]);
    assert_eq!(a.status.code(), Some(0));
    let first = fs::read_to_string(&csv).unwrap();
    let b = lwdet(&["summarize", "--model", "improved", "--nc", "3", "--csv", &csv]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(first, fs::read_to_string(&csv).unwrap());

    let rows: Vec<&str> = first.lines().collect();
    assert_eq!(rows[0], "name,kind,output,params,macs");
    assert_eq!(rows.len(), 1 + 24 + 1);
    assert!(rows.iter().any(|r| r.starts_with("model.10,SegNextAttention,1x256x20x20,")));
    assert!(rows.last().unwrap().starts_with("total,,,2024662,"));
    assert!(stdout(&a).contains("1x67x80x80;1x67x40x40;1x67x20x20"));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        vec!["bogus"],
        vec!["summarize", "--nc", "3"],
        vec!["summarize", "--model", "medium"],
        vec!["compare", "--nc", "0"],
        vec!["infer", "--model", "improved", "--image", "x.ppm", "--conf", "1.5"],
    ] {
        assert_fails(&lwdet(&args), 1);
    }
    let help = lwdet(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("selftest"));
}

#[test]
fn infer_on_black_image_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let img = p(&dir, "black.ppm");
    write_ppm(Path::new(&img), 96, 64, 0);
    let run = |out: &str| {
        let o = lwdet(&["infer", "--model", "improved", "--image", &img, "--conf", "0.999", "--annotate", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        o.stdout
    };
    let (a1, a2) = (p(&dir, "a1.ppm"), p(&dir, "a2.ppm"));
    let s1 = run(&a1);
    assert_eq!(s1, run(&a2));
    let parsed: Value = serde_json::from_slice(&s1).unwrap();
    assert!(parsed.is_array());
    assert_eq!(fs::read(&a1).unwrap(), fs::read(&a2).unwrap());

    // a low threshold yields boxes; formatting stays fixed to four decimals
    let o = lwdet(&["infer", "--model", "baseline", "--image", &img, "--conf", "0", "--seed", "7"]);
    let dets: Value = serde_json::from_slice(&o.stdout).unwrap();
    let first = &dets.as_array().unwrap()[0];
    assert_eq!(first["score"].to_string().split('.').nth(1).unwrap().len(), 4);
    for d in dets.as_array().unwrap() {
        let b: Vec<f64> = d["box"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(0.0 <= b[0] && b[0] < b[2] && b[2] <= 96.0);
        assert!(0.0 <= b[1] && b[1] < b[3] && b[3] <= 64.0);
    }
}

#[test]
fn infer_io_failures_exit_two_and_leave_no_output() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "ann.ppm");
    assert_fails(&lwdet(&["infer", "--model", "improved", "--image", &p(&dir, "missing.ppm"), "--annotate", &out]), 2);
    assert!(!Path::new(&out).exists());

    let ascii = p(&dir, "ascii.ppm");
    fs::write(&ascii, "P3\n1 1\n255\n0 0 0\n").unwrap();
    assert_fails(&lwdet(&["infer", "--model", "improved", "--image", &ascii]), 2);

    let img = p(&dir, "img.ppm");
    write_ppm(Path::new(&img), 8, 8, 40);
    let junk = p(&dir, "junk.rwt");
    fs::write(&junk, b"RWT1\x05").unwrap();
    assert_fails(&lwdet(&["infer", "--model", "improved", "--weights", &junk, "--image", &img]), 2);
}

#[test]
fn fuse_round_trips_and_rejects_wrong_variant() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (p(&dir, "a.rwt"), p(&dir, "b.rwt"), p(&dir, "c.rwt"));
    assert_eq!(lwdet(&["fuse", "--model", "improved", "--seed", "3", "--out", &a]).status.code(), Some(0));
    assert_eq!(lwdet(&["fuse", "--model", "improved", "--seed", "3", "--out", &b]).status.code(), Some(0));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // fusing already fused weights is a no-op
    assert_eq!(lwdet(&["fuse", "--model", "improved", "--weights", &a, "--out", &c]).status.code(), Some(0));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let img = p(&dir, "img.ppm");
    write_ppm(Path::new(&img), 32, 32, 200);
    assert_fails(&lwdet(&["infer", "--model", "baseline", "--weights", &a, "--image", &img]), 3);
}

#[test]
fn fuse_verify_reports_small_deviation() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "fused.rwt");
    let o = lwdet(&["fuse", "--model", "improved", "--out", &out, "--verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let dev: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max head deviation over 5 inputs: "))
        .and_then(|v| v.parse().ok())
        .unwrap();
    assert!(dev < 1e-3, "{dev}");
    assert!(Path::new(&out).exists());
}

fn dataset(dir: &TempDir, label_b: &str) -> String {
    write_ppm(&dir.path().join("a.ppm"), 64, 48, 90);
    write_ppm(&dir.path().join("b.ppm"), 40, 40, 10);
    fs::write(dir.path().join("a.txt"), "0 0.5 0.5 0.4 0.4\n2 0.2 0.3 0.1 0.2\n").unwrap();
    fs::write(dir.path().join("b.txt"), label_b).unwrap();
    let manifest = p(dir, "m.json");
    fs::write(
        &manifest,
        r#"{"classes": ["WSSV", "BSS", "SBGS"], "items": [
            {"image": "a.ppm", "label": "a.txt"},
            {"image": "b.ppm", "label": "b.txt"}]}"#,
    )
    .unwrap();
    manifest
}

#[test]
fn eval_writes_consistent_reports() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(&dir, "1 0.5 0.5 0.5 0.5\n");
    let (json, csv) = (p(&dir, "r.json"), p(&dir, "r.csv"));
    let o = lwdet(&["eval", "--model", "improved", "--manifest", &manifest, "--out", &json, "--csv", &csv]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stdout.is_empty());

    let r: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(r["images"], 2);
    assert_eq!(r["truths"], 3);
    let (tp, fp, fn_) = (r["tp"].as_u64().unwrap(), r["fp"].as_u64().unwrap(), r["fn"].as_u64().unwrap());
    assert_eq!(tp + fn_, 3);
    assert_eq!(tp + fp, r["detections"].as_u64().unwrap());
    assert_eq!(r["classes"].as_array().unwrap().len(), 3);

    let rows: Vec<String> = fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("WSSV,1,"));
    assert!(rows[4].starts_with("all,3,"));

    let again = lwdet(&["eval", "--model", "improved", "--manifest", &manifest]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), fs::read_to_string(&json).unwrap());
}

#[test]
fn eval_failures_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(&dir, "1 0.5 0.5\n");
    assert_fails(&lwdet(&["eval", "--model", "improved", "--manifest", &manifest]), 2);

    let manifest = dataset(&dir, "7 0.5 0.5 0.5 0.5\n");
    assert_fails(&lwdet(&["eval", "--model", "improved", "--manifest", &manifest]), 3);

    let manifest = dataset(&dir, "");
    assert_fails(&lwdet(&["eval", "--model", "improved", "--nc", "2", "--manifest", &manifest]), 3);

    fs::remove_file(dir.path().join("b.ppm")).unwrap();
    let out = p(&dir, "r.json");
    assert_fails(&lwdet(&["eval", "--model", "improved", "--manifest", &p(&dir, "m.json"), "--out", &out]), 2);
    assert!(!Path::new(&out).exists());
}

#[test]
fn selftest_passes() {
    let o = lwdet(&["selftest"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}
