use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_flownet");

fn example() -> String {
    format!("{}/../../scenarios/example7.scenario", env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// One link, capacity 1, closed half the time.
const FLICKER: &str = r#"{
  "name": "flicker",
  "links": [{ "sending": { "family": "ctm", "v": 1.0, "capacity": 1.0 }, "wave_speed": 1.0 }],
  "edges": [],
  "modes": {
    "rates": [[0.0, 1.0], [1.0, 0.0]],
    "sending_caps": [{ "mode": 2, "link": 1, "cap": 0.0 }]
  },
  "control": { "kind": "ol" },
  "demand": 0.3,
  "analysis": { "box_samples": 500, "horizon": 1000.0, "seeds": 4, "sim_tol": 0.02 }
}"#;

fn write_scenario(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn synthesize_md_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("md.csv");
    let o = run(&[
        "synthesize",
        &example(),
        "--control",
        "md",
        "--format",
        "csv",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv, stdout(&o));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("mode,from,to,mu"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4 * 8);
    // flow leaving the origin equals the per-mode min cut: 1 with link 6 open, 0.5 without
    for (mode, cut) in [("1", 1.0), ("2", 0.5), ("3", 1.0), ("4", 0.5)] {
        let out1: f64 = rows
            .iter()
            .filter(|r| r[0] == mode && r[1] == "1")
            .map(|r| r[3].parse::<f64>().unwrap())
            .sum();
        assert!((out1 - cut).abs() < 1e-9, "mode {mode}: {out1}");
    }
}

#[test]
fn synthesize_ol_text() {
    let o = run(&["synthesize", &example(), "--control", "ol"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("from"));
    assert!(text.contains("max-flow value: 1.000000"), "{text}");
}

#[test]
fn logit_cannot_be_synthesised() {
    let o = run(&["synthesize", &example()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("logit"));
}

#[test]
fn analyze_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "flicker.scenario", FLICKER);
    let out = dir.path().join("reports");
    let o = run(&["analyze", &sc, "--format", "csv", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary, stdout(&o));
    let value = |q: &str| -> f64 {
        summary
            .lines()
            .find(|l| l.starts_with(&format!("{q},")))
            .unwrap()
            .split(',')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((value("emcc") - 0.5).abs() < 1e-12);
    assert!((value("alpha_t") - 0.5).abs() < 2e-3);
    assert!((value("alpha_sim") - 0.5).abs() < 0.05);
    assert!(fs::read_to_string(out.join("box.csv"))
        .unwrap()
        .starts_with("link,lower,upper"));
    assert!(fs::read_to_string(out.join("certificate.csv"))
        .unwrap()
        .starts_with("link,a,eta,z1,z2,b1,b2\n1,"));
}

#[test]
fn simulate_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "flicker.scenario", FLICKER);
    let (csv, svg) = (dir.path().join("t.csv"), dir.path().join("t.svg"));
    let o = run(&[
        "simulate",
        &sc,
        "--horizon",
        "20",
        "--dt",
        "0.05",
        "--out",
        csv.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mode jumps"));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t,s,x1,avg\n0,1,0,0\n"));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn table_with_no_rows_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), "flicker.scenario", FLICKER);
    let m = write_scenario(
        dir.path(),
        "t.matrix",
        r#"{ "scenario": "flicker.scenario", "controls": [{ "kind": "md" }, { "kind": "ol" }] }"#,
    );
    let o = run(&["table", &m, "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "storage,cyber,physical,md_t,md_p,md_sim,ol_t,ol_p,ol_sim\n");
}

#[test]
fn table_rows_without_simulation() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), "flicker.scenario", FLICKER);
    let m = write_scenario(
        dir.path(),
        "t.matrix",
        r#"{ "scenario": "flicker.scenario", "rows": [{ "physical": true }, { "physical": false }] }"#,
    );
    let o = run(&["table", &m, "--no-sim"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let cols = |l: &str| l.split_whitespace().map(String::from).collect::<Vec<_>>();
    assert_eq!(
        cols(lines[0]),
        ["storage", "cyber", "physical", "ol_t", "ol_p", "ol_sim"]
    );
    assert_eq!(cols(lines[1])[2..], ["yes", "0.500", "0.500", "-"]);
    assert_eq!(cols(lines[2])[2..], ["no", "1.000", "1.000", "-"]);
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_scenario(dir.path(), "bad.scenario", "{\n  \"name\": 3\n}");
    let o = run(&["analyze", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = run(&["analyze", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let sc = write_scenario(dir.path(), "flicker.scenario", FLICKER);
    let o = run(&["analyze", &sc, "--dt", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("analysis.dt"), "{}", stderr(&o));

    let o = run(&["analyse", &sc]);
    assert_eq!(o.status.code(), Some(1));

    let no_demand = write_scenario(dir.path(), "nd.scenario", &FLICKER.replace("\"demand\": 0.3,", ""));
    let o = run(&["simulate", &no_demand]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "flicker.scenario", FLICKER);
    let target = dir.path().join("no/such/dir/t.csv");
    let o = run(&["simulate", &sc, "--horizon", "1", "--out", target.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn help_exits_0() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("synthesize"));
}
